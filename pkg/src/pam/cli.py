"""Command-line entry point: ``pam <subcommand> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 artifact/config
hash mismatch. Failures print one line ``error: <category>: <message>``.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
import tempfile
import time

import numpy as np
import torch

from .pathlearn import PriorTable, estimate_prior
from .pathspace import cost_bounds, enumerate_paths, path_cost
from .supernet import Checkpoint, build, cost_table
from .synthdata import MattingDataset, generate_sample
from .trainer import (
    RunConfig,
    TrainingDiverged,
    budget_fraction,
    evaluate_model,
    run_stage1,
    run_stage2,
    run_stage3,
)

log = logging.getLogger("pam")

EVAL_FIELDS = ["budget", "flops_mean", "sad", "mse", "grad", "conn", "l1_unknown"]
REPORT_FIELDS = ["budget", "flops_mean", "l1", "sad", "mse", "grad", "conn"]


class CliError(Exception):
    def __init__(self, category: str, message: str, code: int = 1):
        super().__init__(message)
        self.category, self.code = category, code


class UsageError(CliError):
    def __init__(self, message: str):
        super().__init__("usage", message, 2)


class HashMismatch(CliError):
    def __init__(self, message: str):
        super().__init__("hash-mismatch", message, 3)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# --- io helpers --------------------------------------------------------------


def digest(blob: bytes) -> str:
    return hashlib.sha256(blob).hexdigest()[:16]


def write_atomic(path: str, data: bytes | str) -> None:
    if isinstance(data, str):
        data = data.encode()
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_bytes(path: str, what: str) -> bytes:
    try:
        with open(path, "rb") as fh:
            return fh.read()
    except OSError as exc:
        raise CliError("io", f"cannot read {what} {path}: {exc.strerror}") from exc


def load_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        return RunConfig.from_dict(json.loads(read_bytes(path, "config")))
    except (TypeError, ValueError) as exc:
        raise CliError("config", f"{path}: {exc}") from exc


def load_checkpoint(path: str) -> tuple[Checkpoint, str]:
    blob = read_bytes(path, "checkpoint")
    try:
        return Checkpoint.from_bytes(blob), digest(blob)
    except Exception as exc:
        raise CliError("checkpoint", f"{path}: {exc}") from exc


def check_config(ckpt: Checkpoint, config: RunConfig, path: str) -> None:
    if ckpt.config_hash != config.model.hash():
        raise HashMismatch(f"{path} was built for config {ckpt.config_hash}, --config gives {config.model.hash()}")


def save_checkpoint(ckpt: Checkpoint, path: str) -> str:
    blob = ckpt.to_bytes()
    write_atomic(path, blob)
    return digest(blob)


def write_manifest(out: str, command: str, config: RunConfig | None, seeds: dict, inputs: dict, outputs: dict,
                   started: float) -> None:
    manifest = {
        "command": command,
        "config": config.to_dict() if config else None,
        "seeds": seeds,
        "inputs": inputs,
        "outputs": outputs,
        "duration_s": round(time.time() - started, 3),
    }
    write_atomic(out + ".manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _png_bytes(array: np.ndarray) -> bytes:
    from PIL import Image

    buf = io.BytesIO()
    Image.fromarray(array).save(buf, format="PNG")
    return buf.getvalue()


def _to_u8(x: np.ndarray) -> np.ndarray:
    return np.round(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8)


def _read_image(path: str, mode: str) -> np.ndarray:
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as im:
            return np.asarray(im.convert(mode), dtype=np.float32) / 255.0
    except (OSError, UnidentifiedImageError) as exc:
        raise CliError("io", f"cannot read image {path}: {exc}") from exc


def _parse_budgets(text: str, bounds) -> list[int]:
    """Comma-separated budgets; a trailing ``%`` means a percentage of the largest cost."""
    budgets = []
    for item in text.split(","):
        item = item.strip()
        try:
            budgets.append(budget_fraction(float(item[:-1]) / 100, bounds) if item.endswith("%") else int(item))
        except ValueError as exc:
            raise UsageError(f"--budgets: bad entry {item!r}") from exc
    if len(set(budgets)) != len(budgets):
        raise UsageError("--budgets: duplicate budgets")
    return budgets


# --- subcommands -------------------------------------------------------------


def cmd_data(args) -> int:
    started = time.time()
    config = load_config(args.config)
    data = config.data
    rows = []
    for i in range(args.count):
        s = generate_sample(args.seed, i, data, args.split)
        files = {
            "image": _png_bytes(_to_u8(s.image.transpose(1, 2, 0))),
            "trimap": _png_bytes(_to_u8(s.trimap)),
            "alpha": _png_bytes(_to_u8(s.alpha)),
            "fg": _png_bytes(_to_u8(s.fg.transpose(1, 2, 0))),
            "bg": _png_bytes(_to_u8(s.bg.transpose(1, 2, 0))),
        }
        names = {}
        for kind, blob in files.items():
            names[kind] = f"{s.sample_id}_{kind}.png"
            write_atomic(os.path.join(args.out, names[kind]), blob)
        rows.append([s.sample_id, args.seed, args.split, i] + [names[k] for k in files])
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["sample_id", "seed", "split", "index", "image", "trimap", "alpha", "fg", "bg"])
    writer.writerows(rows)
    index = os.path.join(args.out, "manifest.csv")
    write_atomic(index, buf.getvalue())
    write_manifest(os.path.join(args.out, "run"), "data", config, {"seed": args.seed}, {},
                   {"manifest.csv": digest(buf.getvalue().encode())}, started)
    return 0


def cmd_train(args) -> int:
    started = time.time()
    if args.stage == 3 and not args.prior:
        raise UsageError("--prior is required for --stage 3")
    if args.stage == 3 and not args.teacher:
        raise UsageError("--teacher is required for --stage 3")
    if args.stage in (2, 3) and not args.input:
        raise UsageError(f"--in is required for --stage {args.stage}")
    config = load_config(args.config)
    inputs = {}
    if args.input:
        ckpt, inputs["in"] = load_checkpoint(args.input)
        check_config(ckpt, config, args.input)
    else:
        ckpt = build(config.model, config.train.seed)
    train = MattingDataset(args.data_seed, config.train.train_size, config.data, "train")
    try:
        if args.stage == 1:
            result = run_stage1(ckpt, config.train, train)
        elif args.stage == 2:
            result = run_stage2(ckpt, config.train, train)
        else:
            teacher, inputs["teacher"] = load_checkpoint(args.teacher)
            check_config(teacher, config, args.teacher)
            prior = _load_prior(args.prior, ckpt)
            if prior.checkpoint_hash and prior.checkpoint_hash != inputs["in"]:
                raise HashMismatch(f"{args.prior} was estimated from checkpoint {prior.checkpoint_hash}, "
                                   f"--in is {inputs['in']}")
            inputs["prior"] = digest(read_bytes(args.prior, "prior"))
            result = run_stage3(ckpt, prior, config.train, train, teacher)
    except TrainingDiverged as exc:
        raise CliError("diverged", str(exc)) from exc
    except ValueError as exc:
        raise CliError("train", str(exc)) from exc
    out_hash = save_checkpoint(result.checkpoint, args.out)
    log_text = result.log_csv()
    write_atomic(args.out + ".log.csv", log_text)
    outputs = {"checkpoint": out_hash, "log": digest(log_text.encode())}
    if result.info:
        write_atomic(args.out + ".info.json", json.dumps(result.info, sort_keys=True) + "\n")
    write_manifest(args.out, f"train --stage {args.stage}", config,
                   {"seed": config.train.seed, "data_seed": args.data_seed}, inputs, outputs, started)
    return 0


def _load_prior(path: str, ckpt: Checkpoint) -> PriorTable:
    csv_text = read_bytes(path, "prior").decode()
    try:
        sidecar = json.loads(read_bytes(path + ".json", "prior sidecar"))
    except ValueError as exc:
        raise CliError("prior", f"{path}.json: {exc}") from exc
    model = ckpt.to_model()
    if (int(sidecar.get("c_min", -1)), int(sidecar.get("c_max", -1))) != model.bounds:
        raise HashMismatch(f"{path} was built for a different cost table")
    try:
        return PriorTable.from_files(csv_text, sidecar, model.table)
    except (KeyError, ValueError) as exc:
        raise CliError("prior", f"{path}: {exc}") from exc


def cmd_estimate_prior(args) -> int:
    started = time.time()
    config = load_config(args.config)
    ckpt, ckpt_hash = load_checkpoint(args.checkpoint)
    check_config(ckpt, config, args.checkpoint)
    n_val = args.n_val if args.n_val is not None else config.train.n_val
    n_g = args.n_g if args.n_g is not None else config.train.n_g
    model = ckpt.to_model()
    data = MattingDataset(args.data_seed, n_val, config.data, "prior")
    prior = estimate_prior(model, list(data.batches(50)), model.table, config.model.embedding_buckets, n_g, ckpt_hash)
    csv_text = prior.to_csv()
    sidecar = json.dumps(prior.sidecar(), indent=2, sort_keys=True) + "\n"
    write_atomic(args.out, csv_text)
    write_atomic(args.out + ".json", sidecar)
    write_manifest(args.out, "estimate-prior", config, {"data_seed": args.data_seed}, {"checkpoint": ckpt_hash},
                   {"prior": digest(csv_text.encode()), "sidecar": digest(sidecar.encode())}, started)
    return 0


def cmd_infer(args) -> int:
    ckpt, _ = load_checkpoint(args.checkpoint)
    model = ckpt.to_model()
    image = _read_image(args.image, "RGB")
    trimap = _read_image(args.trimap, "L")
    if image.shape[:2] != trimap.shape:
        raise CliError("input", f"image {image.shape[:2]} and trimap {trimap.shape} sizes differ")
    h, w = trimap.shape
    if h % ckpt.config.stride or w % ckpt.config.stride:
        raise CliError("input", f"image sides must be multiples of {ckpt.config.stride}, got {h}x{w}")
    trimap = np.where(trimap < 0.25, 0.0, np.where(trimap > 0.75, 1.0, 0.5)).astype(np.float32)
    c_min, c_max = model.bounds
    if not c_min <= args.budget <= c_max:
        raise CliError("budget", f"budget {args.budget} outside [{c_min}, {c_max}]")
    with torch.no_grad():
        out = model.forward_budgeted(
            torch.from_numpy(image.transpose(2, 0, 1).copy())[None], torch.from_numpy(trimap)[None, None], args.budget
        )
    path = out.paths[0]
    write_atomic(args.out, _png_bytes(_to_u8(out.alpha[0, 0].numpy())))
    print(json.dumps({"path": str(path), "flops": path_cost(path, model.table)}))
    return 0


def cmd_eval(args) -> int:
    started = time.time()
    config = load_config(args.config)
    ckpt, ckpt_hash = load_checkpoint(args.checkpoint)
    check_config(ckpt, config, args.checkpoint)
    model = ckpt.to_model()
    budgets = _parse_budgets(args.budgets, model.bounds)
    data = MattingDataset(args.data_seed, config.train.eval_size, config.data, "eval")
    try:
        rows = evaluate_model(model, data, budgets)
    except ValueError as exc:
        raise CliError("budget", str(exc)) from exc
    buf = io.StringIO()
    writer = csv.DictWriter(buf, EVAL_FIELDS, extrasaction="ignore", lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    write_atomic(args.out, buf.getvalue())
    write_manifest(args.out, "eval", config, {"data_seed": args.data_seed}, {"checkpoint": ckpt_hash},
                   {"eval": digest(buf.getvalue().encode())}, started)
    return 0


def cmd_paths(args) -> int:
    config = load_config(args.config)
    table = cost_table(config.model)
    c_min, c_max = cost_bounds(table)
    budget = c_max if args.budget is None else args.budget
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["path", "flops", "feasible"])
    for p in enumerate_paths(table.n_stages):
        cost = path_cost(p, table)
        writer.writerow([str(p), cost, int(cost <= budget)])
    if args.out:
        write_atomic(args.out, buf.getvalue())
    else:
        sys.stdout.write(buf.getvalue())
    return 0


def read_eval_csv(path: str) -> list[dict]:
    text = read_bytes(path, "eval csv").decode()
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or not set(EVAL_FIELDS) <= set(header):
        raise CliError("csv", f"{path}:1: expected columns {','.join(EVAL_FIELDS)}")
    rows = []
    for line, values in enumerate(reader, start=2):
        if not values:
            continue
        if len(values) != len(header):
            raise CliError("csv", f"{path}:{line}: expected {len(header)} fields, got {len(values)}")
        raw = dict(zip(header, values))
        try:
            row = {"budget": int(raw["budget"])}
            row.update({k: float(raw[k]) for k in EVAL_FIELDS[1:]})
        except ValueError as exc:
            raise CliError("csv", f"{path}:{line}: {exc}") from exc
        row["l1"] = row.pop("l1_unknown")
        row["_where"] = f"{path}:{line}"
        rows.append(row)
    return rows


def merge_reports(paths: list[str]) -> str:
    seen = {}
    for path in paths:
        for row in read_eval_csv(path):
            if row["budget"] in seen:
                raise CliError("csv", f"{row['_where']}: duplicate budget {row['budget']} (first at {seen[row['budget']]['_where']})")
            seen[row["budget"]] = row
    buf = io.StringIO()
    writer = csv.DictWriter(buf, REPORT_FIELDS, extrasaction="ignore", lineterminator="\n")
    writer.writeheader()
    for budget in sorted(seen):
        writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in seen[budget].items()})
    return buf.getvalue()


def cmd_report(args) -> int:
    text = merge_reports(args.inputs)
    if args.out:
        write_atomic(args.out, text)
    else:
        sys.stdout.write(text)
    return 0


# --- wiring ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pam", description="Budget-adaptive matting supernet.")
    parser.add_argument("--workers", type=int, default=None, help="torch threads (default: $PAM_WORKERS or 1)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("data", help="write synthetic samples as PNG files")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=["train", "eval", "prior"], default="train")
    p.add_argument("--config")
    p.set_defaults(func=cmd_data)

    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("--stage", type=int, choices=[1, 2, 3], required=True)
    p.add_argument("--config")
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--in", dest="input")
    p.add_argument("--out", required=True)
    p.add_argument("--prior")
    p.add_argument("--teacher")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("estimate-prior", help="Monte Carlo prior over optimal paths per budget bucket")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--n-val", type=int)
    p.add_argument("--n-g", type=int)
    p.add_argument("--data-seed", type=int, default=0)
    p.set_defaults(func=cmd_estimate_prior)

    p = sub.add_parser("infer", help="predict one alpha matte under a budget")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--trimap", required=True)
    p.add_argument("--budget", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="metrics per budget on the synthetic eval split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config")
    p.add_argument("--budgets", required=True, help="comma list of FLOP budgets or percentages of the max, e.g. 95%%,85%%")
    p.add_argument("--out", required=True)
    p.add_argument("--data-seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("paths", help="list every path with its cost")
    p.add_argument("--list", action="store_true", required=True)
    p.add_argument("--config")
    p.add_argument("--budget", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_paths)

    p = sub.add_parser("report", help="merge eval CSVs into one cost-error curve")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def _workers(value) -> int:
    if value is None:
        env = os.environ.get("PAM_WORKERS", "1")
        try:
            value = int(env)
        except ValueError as exc:
            raise UsageError(f"PAM_WORKERS must be an integer, got {env!r}") from exc
    if value < 1:
        raise UsageError("--workers must be at least 1")
    return value


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        torch.set_num_threads(_workers(args.workers))
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc.category}: {exc}", file=sys.stderr)
        return exc.code
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except Exception as exc:
        print(f"error: internal: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

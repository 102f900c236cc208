"""Batch command-line front end: synth, train, infer, eval, project, pareto, stability and explore."""

import argparse
import csv
import logging
import sys
from pathlib import Path
from typing import List, Sequence

import numpy as np

from flint_tsr.embed import EncoderConfig, LatentEncoder, dataset_rows, embed_dataset, train_encoder
from flint_tsr.evalkit import (
    METRICS,
    MetricRecord,
    epe,
    linear_baseline,
    pareto_fronts,
    projection_metrics,
    psnr,
    read_embedding,
    read_metric_table,
    subset_stability,
    write_embedding,
    write_metric_records,
    write_stability,
    zero_flow_epe,
)
from flint_tsr.fieldio import (
    EnsembleSet,
    FlowGrid,
    Grid,
    Member,
    SynthConfig,
    normalize_ensemble,
    read_ensemble,
    read_raw,
    synth_ensemble,
    write_ensemble,
    write_pgm,
    write_raw,
)
from flint_tsr.flint import FlintConfig, infer
from flint_tsr.hyper import FlintStarConfig, HyperConfig, hyper_infer, sweep
from flint_tsr.losses import LossWeights
from flint_tsr.params import load_checkpoint, save_checkpoint
from flint_tsr.trainer import HYPER, TrainConfig, train

logger = logging.getLogger(__name__)

EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3
CHECKPOINT_NAME = "model.flc"


class UsageError(Exception):
    """Bad command-line arguments."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _floats(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _frames(text: str) -> tuple:
    values = text.split(",")
    if len(values) != 2:
        raise argparse.ArgumentTypeError(f"expected two frame indices s,u, got {text!r}")
    try:
        return int(values[0]), int(values[1])
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"frame indices must be integers, got {text!r}") from exc


def _read_text(path) -> str:
    return Path(path).read_text(encoding="utf-8") if path else ""


def load_unit_dataset(manifest) -> EnsembleSet:
    """Read an ensemble and map it to [0, 1] with its global range."""
    return normalize_ensemble(read_ensemble(manifest)).grid


def _member(dataset: EnsembleSet, index: int) -> Member:
    if not 0 <= index < len(dataset.members):
        raise ValueError(f"member {index} is out of range for {len(dataset.members)} members")
    return dataset.members[index]


def _load_model(path):
    """Checkpoint params plus ``(is_hyper, flow_target)``."""
    checkpoint = load_checkpoint(path, FlintConfig, FlintStarConfig, HyperConfig, TrainConfig)
    params = checkpoint.params
    is_hyper = HyperConfig.type_name in checkpoint.sections
    flow_target = "direct"
    if TrainConfig.type_name in checkpoint.sections:
        flow_target = params.get_config(TrainConfig).flow_target
    return params, is_hyper, flow_target


def _predict(params, is_hyper: bool, member: Member, d_s: Grid, d_u: Grid, tau: float) -> tuple:
    if is_hyper:
        return hyper_infer(params, member.sim_params, d_s, d_u, tau)
    return infer(params, d_s, d_u, tau)


def cmd_synth(args) -> None:
    cfg = SynthConfig.from_text(_read_text(args.config))
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    out = Path(args.out)
    write_ensemble(synth_ensemble(cfg), out)
    (out / "synth.cfg").write_text(cfg.to_text(), encoding="utf-8")


def cmd_train(args) -> None:
    text = _read_text(args.config)
    cfg = TrainConfig.from_text(text)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    weights = LossWeights.from_text(text)
    dataset = load_unit_dataset(args.data)
    hyper_config = None
    if cfg.mode == HYPER:
        model_config = FlintStarConfig.from_text(text)
        hyper_config = HyperConfig.from_text(text).replace(param_dim=dataset.param_dim)
    else:
        model_config = FlintConfig.from_text(text)
    params, history = train(dataset, model_config, cfg, weights, hyper_config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(params, out / CHECKPOINT_NAME, cfg, weights)
    history.write_csv(out / "history.csv")
    logger.info("best epoch %d of %d", history.best_epoch, len(history.epoch))


def cmd_infer(args) -> None:
    if args.rate < 1:
        raise ValueError(f"rate must be at least 1, got {args.rate}")
    params, is_hyper, flow_target = _load_model(args.checkpoint)
    member = _member(load_unit_dataset(args.data), args.member)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n_steps = len(member.timesteps)
    last_key = (n_steps - 1) // args.rate * args.rate
    rows = []
    for t in range(last_key + 1):
        s = t // args.rate * args.rate
        gt = member.timesteps[t]
        if t == s:
            pred, tau, flow_err = gt, 0.0, None
        else:
            u = s + args.rate
            tau = (t - s) / args.rate
            pred, flow = _predict(params, is_hyper, member, member.timesteps[s], member.timesteps[u], tau)
            write_raw(flow, out / f"flow_{t:04d}.flg")
            flow_err = None
            if member.flows is not None:
                scale = (u - t) if flow_target == "gap" else 1.0
                flow_err = epe(FlowGrid(member.flows[t].components * scale), flow)
        write_raw(pred, out / f"pred_{t:04d}.flg")
        if args.pgm:
            write_pgm(pred, out / f"pred_{t:04d}.pgm")
        rows.append([t, repr(tau), repr(psnr(gt, pred)), "" if flow_err is None else repr(flow_err)])
        logger.debug("frame %d: tau %.3f", t, tau)
    with open(out / "infer.csv", "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["frame", "tau", "psnr", "epe"])
        writer.writerows(rows)
    logger.info("interpolated %d frames at rate %d into %s", len(rows), args.rate, out)


def cmd_eval(args) -> None:
    member = _member(load_unit_dataset(args.data), args.member)
    pred_dir = Path(args.pred)
    preds = sorted(pred_dir.glob("pred_*.flg"))
    if not preds:
        raise ValueError(f"{pred_dir}: no pred_XXXX.flg files")
    rows, scores = [], []
    for path in preds:
        t = int(path.stem.split("_")[1])
        if not 0 <= t < len(member.timesteps):
            raise ValueError(f"{path.name}: frame {t} is outside the member's {len(member.timesteps)} timesteps")
        s = t // args.rate * args.rate
        if s == t:
            continue
        gt = member.timesteps[t]
        u = min(s + args.rate, len(member.timesteps) - 1)
        baseline = linear_baseline(member.timesteps[s], member.timesteps[u], (t - s) / (u - s))
        row = [t, psnr(gt, read_raw(path)), psnr(gt, baseline), None, None]
        flow_path = pred_dir / f"flow_{t:04d}.flg"
        if member.flows is not None and flow_path.exists():
            row[3] = epe(member.flows[t], read_raw(flow_path))
            row[4] = zero_flow_epe(member.flows[t])
        rows.append(row)
        scores.append(row[1])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "eval.csv", "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["frame", "psnr", "linear_psnr", "epe", "zero_flow_epe"])
        for row in rows:
            writer.writerow([row[0]] + ["" if v is None else repr(float(v)) for v in row[1:]])
    if scores:
        logger.info("mean psnr over %d interpolated frames: %.3f dB", len(scores), float(np.mean(scores)))


def _embedding(args):
    dataset = load_unit_dataset(args.data)
    if args.backend != "encoder":
        return embed_dataset(dataset, args.backend)
    rows, _ = dataset_rows(dataset)
    cfg = EncoderConfig.from_text(_read_text(args.config)).replace(input_dim=rows.shape[1])
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    encoder = LatentEncoder(cfg)
    train_encoder(encoder, rows)
    return embed_dataset(dataset, "encoder", encoder)


def cmd_project(args) -> None:
    emb = _embedding(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_embedding(emb, out / "embedding.csv")
    record = MetricRecord(args.backend)
    for name, value in projection_metrics(emb).items():
        if value is None:
            logger.warning("%s is absent for this embedding", name)
        else:
            record.add(name, value)
    write_metric_records([record], out / "metrics.csv")


def cmd_pareto(args) -> None:
    objectives = args.objectives.split(",")
    ids, matrix = read_metric_table(args.metrics, objectives)
    fronts = pareto_fronts(matrix)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "pareto.csv", "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["index", "model", "front"])
        ranked = sorted((i, rank) for rank, front in enumerate(fronts) for i in front)
        writer.writerows([i, ids[i], rank] for i, rank in ranked)
    logger.info("pareto frontier: %s", [ids[i] for i in fronts[0]] if fronts else [])


def cmd_stability(args) -> None:
    if not args.embedding and not args.data:
        raise ValueError("stability needs --embedding or --data")
    emb = read_embedding(args.embedding) if args.embedding else _embedding(args)
    results = subset_stability(emb, args.fractions, seed=args.seed or 0)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_stability(results, out / "stability.csv")


def cmd_explore(args) -> None:
    params, is_hyper, _ = _load_model(args.checkpoint)
    if not is_hyper:
        raise ValueError(f"{args.checkpoint}: explore needs a parameter-conditioned checkpoint")
    member = _member(load_unit_dataset(args.data), args.member)
    s, u = args.frames
    n_steps = len(member.timesteps)
    if not 0 <= s < u < n_steps:
        raise ValueError(f"frames {s},{u} must satisfy 0 <= s < u < {n_steps}")
    d_s, d_u = member.timesteps[s], member.timesteps[u]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, point in enumerate(sweep(member.sim_params, args.sweep_index, args.params)):
        pred, flow = hyper_infer(params, point, d_s, d_u, args.tau)
        point_dir = out / f"point_{i:02d}"
        point_dir.mkdir(exist_ok=True)
        write_raw(pred, point_dir / "pred.flg")
        write_raw(flow, point_dir / "flow.flg")
        if args.pgm:
            write_pgm(pred, point_dir / "pred.pgm")
        magnitude = float(np.mean(np.linalg.norm(flow.components, axis=0)))
        rows.append([i] + [repr(float(p)) for p in point] + [repr(magnitude)])
    with open(out / "explore.csv", "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["point"] + [f"p{j}" for j in range(len(member.sim_params))] + ["mean_flow_magnitude"])
        writer.writerows(rows)
    logger.info("explored %d parameter points into %s", len(rows), out)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="flint-tsr", description="Temporal super-resolution of ensemble scalar fields.")
    parser.add_argument("--verbose", "-v", action="store_true", help="log debug detail")
    commands = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name: str, func, help_text: str, out: bool = True) -> argparse.ArgumentParser:
        sub = commands.add_parser(name, help=help_text, description=help_text)
        sub.set_defaults(func=func)
        if out:
            sub.add_argument("--out", required=True, help="output directory")
        return sub

    def data_flag(sub, required: bool = True):
        sub.add_argument("--data", required=required, help="ensemble manifest.csv")

    sub = command("synth", cmd_synth, "Write a synthetic blob ensemble and its manifest.")
    sub.add_argument("--config", help="SynthConfig file")
    sub.add_argument("--seed", type=int, help="override the config seed")

    sub = command("train", cmd_train, "Train a model and write its checkpoint and history.csv.")
    data_flag(sub)
    sub.add_argument("--config", help="config file with model, TrainConfig and LossWeights keys")
    sub.add_argument("--seed", type=int, help="override the training seed")

    sub = command("infer", cmd_infer, "Interpolate the frames between every rate-th timestep of a member.")
    data_flag(sub)
    sub.add_argument("--checkpoint", required=True, help="checkpoint file")
    sub.add_argument("--member", type=int, default=0, help="member index")
    sub.add_argument("--rate", type=int, default=4, help="interpolation rate r (inputs every r-th frame)")
    sub.add_argument("--pgm", action="store_true", help="also export grayscale images")

    sub = command("eval", cmd_eval, "Score saved predictions against ground truth and baselines.")
    data_flag(sub)
    sub.add_argument("--pred", required=True, help="directory written by infer")
    sub.add_argument("--member", type=int, default=0, help="member index")
    sub.add_argument("--rate", type=int, default=4, help="rate the predictions were made at")

    for name, func, help_text in (
        ("project", cmd_project, "Embed every timestep in 2D and score the projection."),
        ("stability", cmd_stability, "Score projection metrics on random labeled subsets."),
    ):
        sub = command(name, func, help_text)
        data_flag(sub, required=name == "project")
        sub.add_argument("--backend", choices=["pca", "encoder"], default="pca", help="embedding backend")
        sub.add_argument("--config", help="EncoderConfig file for the encoder backend")
        sub.add_argument("--seed", type=int, help="random seed")
    sub.add_argument("--embedding", help="embedding.csv to read instead of embedding --data")
    sub.add_argument("--fractions", type=_floats, default=[0.01, 0.025, 0.05, 0.1], help="label fractions a,b,c")

    sub = command("pareto", cmd_pareto, "Rank models into Pareto fronts (higher is better).")
    sub.add_argument("--metrics", required=True, help="CSV with a model column and one column per objective")
    sub.add_argument("--objectives", default=",".join(METRICS), help="comma-separated objective columns")

    sub = command("explore", cmd_explore, "Sweep one simulation parameter through a conditioned checkpoint.")
    data_flag(sub)
    sub.add_argument("--checkpoint", required=True, help="parameter-conditioned checkpoint")
    sub.add_argument("--member", type=int, default=0, help="member supplying the frames and base parameters")
    sub.add_argument("--frames", type=_frames, default=(0, 4), help="frame indices s,u")
    sub.add_argument("--tau", type=float, default=0.5, help="relative time in (0, 1)")
    sub.add_argument("--params", type=_floats, required=True, help="sweep values p1,p2,...")
    sub.add_argument("--sweep-index", type=int, default=0, help="parameter entry to sweep")
    sub.add_argument("--pgm", action="store_true", help="also export grayscale images")
    return parser


def run(argv: Sequence[str] | None = None) -> int:
    """Run one command; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: usage: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:
        return 0 if exc.code is None else int(exc.code)
    level = logging.DEBUG if args.verbose else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (FloatingPointError, ArithmeticError) as exc:
        print(f"error: numeric: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, OSError, KeyError, TypeError) as exc:
        print(f"error: data: {exc}", file=sys.stderr)
        return EXIT_DATA
    return 0


def main() -> None:
    sys.exit(run())

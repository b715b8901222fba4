"""Command-line entry point tying the pipeline together.

Subcommands: gen, train, calibrate, eval, simulate. Every run writes its
fully-resolved configuration next to its outputs so reruns are
reproducible from the sidecar alone. Exit codes: 0 success, 2 usage
error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys

import numpy as np

from . import conveyor, metrics, ood, sequences, tasksim, tracking
from .config import read_kv, write_kv
from .geometry import BBox
from .net import (NetConfig, TrackerNet, load_checkpoint, save_checkpoint,
                  OOD_INPUTS)
from .training import DivergenceError, TrainConfig, infer_classes, train

RESOLVED_NAME = "resolved_config.txt"

_MODE_FLAGS = {"joint": "joint", "two-stage": "two_stage"}
_OOD_FLAGS = {
    "backbone": "backbone",
    "encoder": "encoder",
    "similarity": "similarity",
    "target-query": "target_query",
}


def _resolve(args, file_cfg: dict[str, str], spec: dict):
    """Merge defaults < config file < explicit flags; returns typed dict."""
    out = {}
    for key, (default, cast) in spec.items():
        flag_val = getattr(args, key, None)
        if flag_val is not None:
            out[key] = flag_val
        elif key in file_cfg:
            out[key] = cast(file_cfg[key])
        else:
            out[key] = default
    return out

def _load_file_cfg(args) -> dict[str, str]:
    if getattr(args, "config", None):
        return read_kv(args.config)
    return {}


def _write_resolved(out_dir: str, command: str, resolved: dict) -> None:
    os.makedirs(out_dir, exist_ok=True)
    payload = {"command": command}
    payload.update({k: v for k, v in resolved.items()})
    write_kv(os.path.join(out_dir, RESOLVED_NAME), payload)


def cmd_gen(args) -> int:
    spec = {
        "seed": (0, int),
        "n_train": (200, int),
        "n_val": (24, int),
        "n_test": (40, int),
        "exit_ratio": (0.2, float),
    }
    cfg = _resolve(args, _load_file_cfg(args), spec)
    train_seqs, val_seqs, test_seqs = conveyor.generate_split(
        cfg["n_train"], cfg["n_val"], cfg["n_test"], cfg["seed"], args.out,
        exit_ratio=cfg["exit_ratio"])
    _write_resolved(args.out, "gen", cfg)
    for name, seqs in (("train", train_seqs), ("val", val_seqs),
                       ("test", test_seqs)):
        st = sequences.compute_stats(seqs)
        print(f"{name}: {len(seqs)} sequences, evr={st.evr:.3f}, "
              f"avl={st.avl:.1f}, ael={st.ael:.1f}, "
              f"miel={st.miel}, mael={st.mael}, classes={st.n_classes}")
    return 0


def cmd_train(args) -> int:
    import torch

    spec = {
        "seed": (0, int),
        "train_mode": ("joint", str),
        "ood_input": ("backbone", str),
        "epochs": (12, int),
        "stage2_epochs": (-1, int),
        "batch_size": (32, int),
        "lr": (1e-3, float),
        "samples_per_epoch": (1600, int),
        "feature_dim": (64, int),
        "template_update_period": (10, int),
    }
    cfg = _resolve(args, _load_file_cfg(args), spec)
    # flag spellings use dashes; internal names use underscores
    cfg["train_mode"] = _MODE_FLAGS.get(cfg["train_mode"], cfg["train_mode"])
    cfg["ood_input"] = _OOD_FLAGS.get(cfg["ood_input"], cfg["ood_input"])
    train_seqs = sequences.load_dataset(os.path.join(args.data, "train"))
    if not train_seqs:
        raise FileNotFoundError(f"no training sequences under {args.data}")
    classes = infer_classes(train_seqs)

    torch.manual_seed(cfg["seed"])
    net_cfg = NetConfig(
        ood_input=cfg["ood_input"], train_mode=cfg["train_mode"],
        template_update_period=cfg["template_update_period"],
        feature_dim=cfg["feature_dim"], n_classes=len(classes))
    net = TrackerNet(net_cfg)
    train_cfg = TrainConfig(
        lr=cfg["lr"], epochs=cfg["epochs"],
        stage2_epochs=None if cfg["stage2_epochs"] < 0 else cfg["stage2_epochs"],
        batch_size=cfg["batch_size"],
        samples_per_epoch=cfg["samples_per_epoch"], seed=cfg["seed"])

    os.makedirs(args.out, exist_ok=True)
    log = train(net, train_cfg, train_seqs, classes,
                log_path=os.path.join(args.out, "train_log.jsonl"))
    ckpt = os.path.join(args.out, "checkpoint.pt")
    save_checkpoint(ckpt, net, classes)
    _write_resolved(args.out, "train", cfg)
    if log:
        last = log[-1]
        print(f"trained {len(log)} epochs; final total loss {last['total']:.4f}")
    print(f"checkpoint written to {ckpt}")
    return 0


def _calib_path(checkpoint: str) -> str:
    return checkpoint + ".calib"


def cmd_calibrate(args) -> int:
    spec = {
        "epsilon_grid": (",".join(str(e) for e in ood.DEFAULT_EPSILON_GRID), str),
        "score_variant": ("max_h", str),
        "window": (5, int),
        "phi_quantile": (0.05, float),
    }
    cfg = _resolve(args, _load_file_cfg(args), spec)
    if not os.path.isfile(args.checkpoint):
        raise FileNotFoundError(f"checkpoint not found: {args.checkpoint}")
    net, _ = load_checkpoint(args.checkpoint)

    val_seqs = sequences.load_dataset(os.path.join(args.data, "val"))
    id_seqs = [s for s in val_seqs if not s.has_exit]
    if not id_seqs:
        raise ValueError(f"no in-distribution validation sequences in {args.data}")

    grid = tuple(float(x) for x in cfg["epsilon_grid"].split(","))
    perturb_cfg = ood.PerturbConfig(epsilon_grid=grid,
                                    score_variant=cfg["score_variant"])
    decider = ood.ExitDecider(window=cfg["window"],
                              calibration_quantile=cfg["phi_quantile"])
    crops = ood.collect_id_crops(net, id_seqs)
    perturb_cfg.epsilon_star = ood.select_epsilon(net, id_seqs, perturb_cfg,
                                                  crops_per_seq=crops)
    phi = ood.calibrate_phi(net, id_seqs, perturb_cfg, decider,
                            crops_per_seq=crops)

    write_kv(_calib_path(args.checkpoint), {
        "epsilon_star": repr(perturb_cfg.epsilon_star),
        "phi": repr(phi),
        "score_variant": perturb_cfg.score_variant,
        "window": decider.window,
        "calibration_quantile": repr(decider.calibration_quantile),
        "epsilon_grid": cfg["epsilon_grid"],
    })
    out_dir = os.path.dirname(os.path.abspath(args.checkpoint))
    _write_resolved(out_dir, "calibrate", cfg)
    print(f"epsilon_star={perturb_cfg.epsilon_star} phi={phi}")
    return 0


def load_calibrated(checkpoint: str):
    """(net, classes, PerturbConfig, ExitDecider) from checkpoint + sidecar."""
    if not os.path.isfile(checkpoint):
        raise FileNotFoundError(f"checkpoint not found: {checkpoint}")
    net, classes = load_checkpoint(checkpoint)
    calib_file = _calib_path(checkpoint)
    if not os.path.isfile(calib_file):
        raise FileNotFoundError(
            f"no calibration sidecar at {calib_file}; run calibrate first")
    kv = read_kv(calib_file)
    perturb_cfg = ood.PerturbConfig(
        epsilon_grid=tuple(float(x) for x in kv["epsilon_grid"].split(",")),
        score_variant=kv["score_variant"],
        epsilon_star=float(kv["epsilon_star"]))
    decider = ood.ExitDecider(window=int(kv["window"]), phi=float(kv["phi"]),
                              calibration_quantile=float(kv["calibration_quantile"]))
    return net, classes, perturb_cfg, decider


def _plot_trace(path: str, trace, visibility, phi: float) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    t = np.arange(len(trace.raw_scores))
    fig, ax = plt.subplots(figsize=(7, 3))
    ax.plot(t, trace.smoothed_scores, color="tab:blue", label="smoothed score")
    ax.axhline(phi, color="tab:orange", linestyle=":", label="threshold")
    pred_visible = (~trace.decisions).astype(float)
    lo, hi = ax.get_ylim()
    ax.plot(t, lo + pred_visible * (hi - lo) * 0.15, color="green",
            drawstyle="steps-post", label="predicted visible")
    ax.plot(t, lo + visibility.astype(float) * (hi - lo) * 0.15, color="red",
            linestyle="--", drawstyle="steps-post", label="ground truth visible")
    ax.set_xlabel("frame")
    ax.set_ylabel("score")
    ax.legend(loc="upper right", fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def cmd_eval(args) -> int:
    spec = {
        "split": ("test", str),
        "plots": (8, int),
    }
    cfg = _resolve(args, _load_file_cfg(args), spec)
    net, _, perturb_cfg, decider_cfg = load_calibrated(args.checkpoint)
    seqs = sequences.load_dataset(os.path.join(args.data, cfg["split"]))
    if not seqs:
        raise FileNotFoundError(f"no sequences under {args.data}/{cfg['split']}")

    os.makedirs(args.out, exist_ok=True)
    trace_dir = os.path.join(args.out, "traces")
    box_dir = os.path.join(args.out, "boxes")
    os.makedirs(trace_dir, exist_ok=True)
    os.makedirs(box_dir, exist_ok=True)

    items = []
    update_scores = []
    seq_records = []
    for seq in seqs:
        decider = ood.OnlineExitDecider(perturb_cfg, decider_cfg)
        res = tracking.track_sequence(net, seq, decider=decider)
        items.append((res.reported_boxes, res.trace, seq))
        scores = np.array([o.update_score for o in res.outputs])
        update_scores.append(scores)

        ood.write_trace(res.trace, os.path.join(trace_dir, f"{seq.id}.txt"))
        with open(os.path.join(box_dir, f"{seq.id}.txt"), "w",
                  encoding="utf-8") as f:
            for b in res.reported_boxes:
                f.write(sequences.format_box(b) + "\n")

        rep = metrics.evaluate_sequence(res.reported_boxes, res.trace, seq)
        t_fpr, t_roc = metrics.exit_metrics(
            scores, metrics.baseline_exit_from_template_score(scores),
            seq.visibility)
        seq_records.append({
            "id": seq.id, "n_frames": rep.n_frames,
            "n_exit_frames": rep.n_exit_frames, "auc": rep.auc,
            "op75": rep.op75, "p_norm": rep.p_norm, "fpr": rep.fpr,
            "auroc": rep.auroc, "template_fpr": t_fpr, "template_auroc": t_roc,
        })

    report = metrics.evaluate_sequences(items)
    gt_vis = np.concatenate([seq.visibility for _, _, seq in items])
    all_scores = np.concatenate(update_scores)
    t_fpr, t_roc = metrics.exit_metrics(
        all_scores, metrics.baseline_exit_from_template_score(all_scores), gt_vis)
    template_report = metrics.MetricsReport(
        auc=report.auc, op75=report.op75, p_norm=report.p_norm,
        fpr=t_fpr, auroc=t_roc, n_frames=report.n_frames,
        n_exit_frames=report.n_exit_frames)

    lines = metrics.report_to_kv(report, prefix="ood_")
    lines += [f"template_fpr={t_fpr!r}", f"template_auroc={t_roc!r}"]
    with open(os.path.join(args.out, "report.txt"), "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
    with open(os.path.join(args.out, "sequences.jsonl"), "w",
              encoding="utf-8") as f:
        for rec in seq_records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")

    plot_dir = os.path.join(args.out, "plots")
    os.makedirs(plot_dir, exist_ok=True)
    with_exit = [it for it in items if it[2].has_exit]
    without = [it for it in items if not it[2].has_exit]
    for boxes, trace, seq in (with_exit + without)[:cfg["plots"]]:
        _plot_trace(os.path.join(plot_dir, f"{seq.id}.png"), trace,
                    seq.visibility, decider_cfg.phi)

    _write_resolved(args.out, "eval", cfg)
    print(metrics.format_summary({"ood": report, "template": template_report}))
    return 0


def _parse_zone(text: str, dwell: int) -> tasksim.PlaceZone:
    parts = [float(x) for x in text.split(",")]
    if len(parts) != 4:
        raise ValueError(f"zone must be x,y,w,h; got {text!r}")
    return tasksim.PlaceZone(*parts, dwell=dwell)


def cmd_simulate(args) -> int:
    spec = {
        "split": ("test", str),
        "flags": ("oracle,none", str),
        "zone": ("6,0,52,64", str),
        "dwell": (3, int),
    }
    cfg = _resolve(args, _load_file_cfg(args), spec)
    sources = [s.strip() for s in cfg["flags"].split(",") if s.strip()]
    for s in sources:
        if s not in ("oracle", "ood", "none"):
            raise ValueError(f"unknown flag source {s!r}")
    if "ood" in sources and not args.checkpoint:
        raise ValueError("--flags ood requires --checkpoint")

    seqs = sequences.load_dataset(os.path.join(args.data, cfg["split"]))
    if not seqs:
        raise FileNotFoundError(f"no sequences under {args.data}/{cfg['split']}")
    zone = _parse_zone(cfg["zone"], cfg["dwell"])

    tracked = {}
    if args.checkpoint:
        net, _, perturb_cfg, decider_cfg = load_calibrated(args.checkpoint)
        for seq in seqs:
            decider = ood.OnlineExitDecider(perturb_cfg, decider_cfg)
            tracked[seq.id] = tracking.track_sequence(net, seq, decider=decider)

    os.makedirs(args.out, exist_ok=True)
    summary_rows = []
    for source in sources:
        results = []
        log_path = os.path.join(args.out, f"episodes_{source}.txt")
        with open(log_path, "w", encoding="utf-8") as f:
            for seq in seqs:
                n = len(seq)
                if source == "oracle":
                    flags = ~seq.visibility
                elif source == "none":
                    flags = np.zeros(n, dtype=bool)
                else:
                    flags = tracked[seq.id].trace.decisions
                if seq.id in tracked:
                    boxes = (tracked[seq.id].reported_boxes if source == "ood"
                             else tracked[seq.id].raw_boxes)
                else:
                    boxes = None  # fall back to ground-truth boxes
                result, log = tasksim.run_episode(seq, flags, zone,
                                                  pred_boxes=boxes)
                results.append((seq, result))
                f.write(f"# {seq.id} success={int(result.success)} "
                        f"place_frame={result.place_frame} holds={result.holds}\n")
                f.write(tasksim.format_episode_log(log) + "\n")

        def rate(pairs):
            return sum(r.success for _, r in pairs) / len(pairs) if pairs else math.nan

        exit_pairs = [(s, r) for s, r in results if s.has_exit]
        summary_rows.append(
            f"{source}: success={rate(results):.3f} over {len(results)} episodes; "
            f"exit-only success={rate(exit_pairs):.3f} over {len(exit_pairs)}")

    summary = "\n".join(summary_rows)
    with open(os.path.join(args.out, "summary.txt"), "w", encoding="utf-8") as f:
        f.write(summary + "\n")
    _write_resolved(args.out, "simulate", cfg)
    print(summary)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="exitrack",
        description="Exit-aware tracking: data generation, training, "
                    "calibration, evaluation, and the conveyor task.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--n-train", dest="n_train", type=int)
    p.add_argument("--n-val", dest="n_val", type=int)
    p.add_argument("--n-test", dest="n_test", type=int)
    p.add_argument("--exit-ratio", dest="exit_ratio", type=float)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a tracker")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--train-mode", dest="train_mode", choices=sorted(_MODE_FLAGS))
    p.add_argument("--ood-input", dest="ood_input", choices=sorted(_OOD_FLAGS))
    p.add_argument("--epochs", type=int)
    p.add_argument("--stage2-epochs", dest="stage2_epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--samples-per-epoch", dest="samples_per_epoch", type=int)
    p.add_argument("--feature-dim", dest="feature_dim", type=int)
    p.add_argument("--template-update-period", dest="template_update_period",
                   type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("calibrate", help="select epsilon and phi on val data")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--epsilon-grid", dest="epsilon_grid")
    p.add_argument("--score-variant", dest="score_variant",
                   choices=("max_h", "g"))
    p.add_argument("--window", type=int)
    p.add_argument("--phi-quantile", dest="phi_quantile", type=float)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("eval", help="evaluate a calibrated tracker")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--split", choices=("test", "val"))
    p.add_argument("--plots", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("simulate", help="run gated pick-and-place episodes")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--config")
    p.add_argument("--split", choices=("test", "val"))
    p.add_argument("--flags")
    p.add_argument("--zone")
    p.add_argument("--dwell", type=int)
    p.set_defaults(func=cmd_simulate)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, DivergenceError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())

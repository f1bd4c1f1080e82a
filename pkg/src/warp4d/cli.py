"""``warp4d`` command line: data generation, warping, training, sampling, evaluation and checks.

Exit codes: 0 success, 1 invalid input or usage, 2 numeric failure.
Log level comes from ``WARP4D_LOG`` (error, info or debug).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import attncheck, config, gradcheck, io, report
from .errors import NumericFailureError, ValidationError
from .flowmatch.batch import SceneData, from_latent
from .flowmatch.train import (
    FlowModel,
    build_model,
    evaluate_scene,
    predict_scene,
    summarize,
    toy_fm_loss,
    toy_samples,
    train,
    write_loss_csv,
    zero_net_baseline,
)
from .geometry import Camera, anchor_track
from .synthdata import (
    SynthConfig,
    anchor_ground_truth,
    anchor_pixels,
    generate_dataset,
    generate_sample,
    list_samples,
    load_sample,
    load_view,
)
from .warp import coverage, warp_video

log = logging.getLogger("warp4d")
LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


class UsageError(ValidationError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _configure_logging():
    name = os.environ.get("WARP4D_LOG", "error").lower()
    if name not in LOG_LEVELS:
        raise ValidationError(f"WARP4D_LOG must be one of {sorted(LOG_LEVELS)}, got {name!r}")
    root = logging.getLogger("warp4d")
    root.handlers.clear()
    h = logging.StreamHandler(sys.stderr)
    h.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root.addHandler(h)
    root.setLevel(LOG_LEVELS[name])
    root.propagate = False


def _common(p, out_required=True):
    p.add_argument("--config", help="YAML run config")
    p.add_argument("--out", required=out_required, help="output directory")
    p.add_argument("--seed", type=int, help="global seed (unsigned 64-bit)")
    p.add_argument("--workers", type=int, help="worker processes (1 is the reference)")


def build_parser():
    ap = _Parser(prog="warp4d", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a synthetic two-view dataset")
    _common(p)
    p.add_argument("--num-samples", type=int)

    p = sub.add_parser("warp", help="forward-warp a rendered view into another camera")
    p.add_argument("--config")
    p.add_argument("--out-dir", "--out", dest="out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--src-dir", required=False)
    p.add_argument("--src-cam")
    p.add_argument("--tgt-cam")

    p = sub.add_parser("train", help="train the velocity network")
    _common(p)
    p.add_argument("--data")
    p.add_argument("--stage", type=int, choices=(1, 2))
    p.add_argument("--steps", type=int)
    p.add_argument("--init-checkpoint")

    for name, text in (("sample", "generate from a checkpoint"), ("eval", "score a checkpoint")):
        p = sub.add_parser(name, help=text)
        _common(p)
        p.add_argument("--checkpoint")
        p.add_argument("--data")
        p.add_argument("--n-steps", type=int)

    p = sub.add_parser("attn-check", help="attention oracle suite")
    _common(p, out_required=False)
    p.add_argument("--n-instances", type=int)

    p = sub.add_parser("grad-check", help="finite-difference gradient suite")
    _common(p, out_required=False)
    p.add_argument("--n-proj", type=int)

    p = sub.add_parser("anchor-demo", help="track the arm centre into the other view")
    _common(p, out_required=False)
    p.add_argument("--sample", help="sample directory (default: generate one)")
    p.add_argument("--consensus-size", type=int)
    p.add_argument("--depth-noise", type=float)
    return ap


# -- helpers -----------------------------------------------------------------

def _prepare(args, section, **flags):
    cfg = config.load(args.config)
    cfg = config.override(cfg, section, seed=args.seed, workers=getattr(args, "workers", None), **flags)
    cfg = config.resolve_paths(cfg)
    if getattr(args, "out", None):
        config.dump(cfg, args.out)
    log.debug("resolved config: %s", json.dumps(cfg, sort_keys=True))
    return cfg


def _require(value, what):
    if value is None:
        raise ValidationError(f"missing {what}")
    return value


def _load_samples(root):
    return [load_sample(p) for p in list_samples(_require(root, "data directory"))]


def _scene_data(root, cfg_train, stage):
    samples = _load_samples(root)
    patch = cfg_train.net.get("patch", 2)
    return SceneData(samples, factor=cfg_train.latent_factor, patch=patch, stage=stage)


def _write_csv(path, rows, header):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def _dump_scene(model, data, out, n_examples, n_steps, seed, all_frames=False):
    """Write predicted / target / warped frames and a comparison grid."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    n = len(data) if all_frames else min(n_examples, len(data))
    if n == 0:
        return
    idx = np.arange(n)
    x_hat, d = predict_scene(model, data, idx, n_steps, seed)
    c = model.confidence_for(d, data.grid)
    pred, tgt, warp = from_latent(x_hat), from_latent(d["x1"]), from_latent(d["x_warp"])
    rows = []
    for j, i in enumerate(idx):
        io.write_png(out / f"pred_{i:05d}.png", pred[j])
        io.write_png(out / f"target_{i:05d}.png", tgt[j])
        io.write_png(out / f"warp_{i:05d}.png", warp[j])
        if j < n_examples:
            rows.append([warp[j], np.clip(c[j], 0, 1), pred[j], tgt[j]])
    if rows:
        report.frame_grid(rows, ["warped prior", "confidence", "generated", "target"], out / "grid.png",
                          [f"#{i}" for i in idx[:len(rows)]])


# -- subcommands -------------------------------------------------------------

def cmd_gen_data(args):
    cfg = _prepare(args, "gen-data", num_samples=args.num_samples)
    g = cfg["gen-data"]
    n = int(g["num_samples"])
    if n < 0:
        raise ValidationError("num_samples must be non-negative")
    paths = generate_dataset(SynthConfig.from_dict(g["synth"]), args.out, n, cfg["seed"], cfg["workers"])
    print(f"wrote {len(paths)} samples to {args.out}")
    return 0


def cmd_warp(args):
    cfg = _prepare(args, "warp", src_dir=args.src_dir, src_cam=args.src_cam, tgt_cam=args.tgt_cam)
    w = cfg["warp"]
    src_dir = Path(_require(w["src_dir"], "--src-dir"))
    src_cam = Camera.from_dict(io.read_json(w["src_cam"])) if w["src_cam"] else None
    rgb, depth, _, src_cam = load_view(src_dir, src_cam)
    tgt_cam = Camera.from_dict(io.read_json(_require(w["tgt_cam"], "--tgt-cam")))
    out = Path(args.out)
    stats = []
    for i, f in enumerate(warp_video(rgb, depth, src_cam, tgt_cam)):
        io.write_png(out / f"rgb_{i:04d}.png", f.rgb)
        io.write_png(out / f"mgeo_{i:04d}.png", f.m_geo)
        io.write_zbuf(out / f"zbuf_{i:04d}.f32", f.zbuf)
        stats.append([i, coverage(f), f.dropped])
    _write_csv(out / "warp_stats.csv", [[a, _fmt(b), c] for a, b, c in stats], ["frame", "coverage", "dropped"])
    print(f"warped {len(stats)} frames, mean coverage {np.mean([s[1] for s in stats]):.4f}")
    return 0


def cmd_train(args):
    cfg = _prepare(args, "train", data=args.data, stage=args.stage, steps=args.steps,
                   init_checkpoint=args.init_checkpoint)
    tcfg = config.train_config(cfg)
    t = cfg["train"]
    out = Path(args.out)
    data = None
    if tcfg.task == "scene":
        data = _scene_data(t["data"], tcfg, tcfg.stage)
        log.info("scene data: %d examples, latent grid %s", len(data), data.grid)
    every = int(t["eval_every"])

    def callback(step, res):
        if every and step and step % every == 0 and data is not None:
            _dump_scene(model, data, out / "evals" / f"step_{step:06d}", t["dump_examples"],
                        t["n_steps"], cfg["seed"])

    if tcfg.init_checkpoint:
        model = FlowModel.load(tcfg.init_checkpoint)
        model.cfg = tcfg
    else:
        model = build_model(tcfg, data.grid if data is not None else None)
    model, history = train(tcfg, data, model, callback)
    model.save(out / "model.ckpt")
    write_loss_csv(out / "loss.csv", history)
    report.loss_figure(history, out / "loss.png")
    if data is not None:
        _dump_scene(model, data, out / "evals" / "final", t["dump_examples"], t["n_steps"], cfg["seed"])
    else:
        report.toy_figure(toy_samples(model, 2000, cfg["seed"]), tcfg.toy_spec(), out / "samples.png")
    last = history[-1] if history else (0, float("nan"), float("nan"), model.alpha)
    print(f"trained {len(history)} steps: final fm {last[1]:.6g} aux {last[2]:.6g}")
    return 0


def _load_model(cfg, section):
    return FlowModel.load(_require(cfg[section]["checkpoint"], "--checkpoint"))


def cmd_sample(args):
    cfg = _prepare(args, "eval", checkpoint=args.checkpoint, data=args.data, n_steps=args.n_steps)
    e = cfg["eval"]
    model = _load_model(cfg, "eval")
    out = Path(args.out)
    if model.cfg.task == "toy":
        x = toy_samples(model, int(e["n_samples"]), cfg["seed"], n_steps=int(e["n_steps"]))
        _write_csv(out / "samples.csv", [[_fmt(a), _fmt(b)] for a, b in x], ["x", "y"])
        report.toy_figure(x, model.cfg.toy_spec(), out / "samples.png")
        print(f"wrote {len(x)} samples")
        return 0
    data = _scene_data(e["data"], model.cfg, int(e["stage"]))
    _dump_scene(model, data, out / "frames", int(e["dump_examples"]), int(e["n_steps"]), cfg["seed"],
                all_frames=True)
    print(f"wrote {len(data)} generated frames")
    return 0


def cmd_eval(args):
    cfg = _prepare(args, "eval", checkpoint=args.checkpoint, data=args.data, n_steps=args.n_steps)
    e = cfg["eval"]
    model = _load_model(cfg, "eval")
    out = Path(args.out)
    if model.cfg.task == "toy":
        spec = model.cfg.toy_spec()
        fm = toy_fm_loss(model, spec, seed=cfg["seed"])
        base = zero_net_baseline(spec, seed=cfg["seed"], sched=model.cfg.sched())
        x = toy_samples(model, int(e["n_samples"]), cfg["seed"], n_steps=int(e["n_steps"]))
        got = np.bincount(spec.assign(x), minlength=len(spec.weights)) / len(x)
        rows = [["fm_loss", _fmt(fm)], ["zero_net_loss", _fmt(base)], ["loss_ratio", _fmt(fm / base)]]
        for k, (w, g) in enumerate(zip(spec.weights, got)):
            rows += [[f"weight_target_{k}", _fmt(w)], [f"weight_sampled_{k}", _fmt(g)]]
        _write_csv(out / "metrics.csv", rows, ["metric", "value"])
        report.toy_figure(x, spec, out / "metrics.png")
        print(f"fm loss {fm:.6g} ({fm / base:.3f} of zero-net), weights {np.round(got, 4).tolist()}")
        return 0
    data = _scene_data(e["data"], model.cfg, int(e["stage"]))
    records = evaluate_scene(model, data, n_steps=int(e["n_steps"]), seed=cfg["seed"])
    keys = [k for k in records[0] if k != "index"]
    rows = [[r["index"]] + [_fmt(r[k]) for k in keys] for r in records]
    mean = summarize(records)
    rows.append(["mean"] + [_fmt(mean[k]) for k in keys])
    _write_csv(out / "metrics.csv", rows, ["index"] + keys)
    report.metrics_figure(records, out / "metrics.png")
    _dump_scene(model, data, out / "frames", int(e["dump_examples"]), int(e["n_steps"]), cfg["seed"])
    print(" ".join(f"{k} {mean[k]:.6g}" for k in keys))
    return 0


def cmd_attn_check(args):
    cfg = _prepare(args, "checks", attn_instances=args.n_instances)
    res = attncheck.run(int(cfg["checks"]["attn_instances"]), cfg["seed"])
    ok = True
    for name, (dev, tol) in res.items():
        passed = dev <= tol
        ok &= passed
        print(f"{name:20s} max deviation {dev:.3e} (tol {tol:.0e}) {'PASS' if passed else 'FAIL'}")
    if args.out:
        _write_csv(Path(args.out) / "attn_check.csv", [[k, _fmt(d), _fmt(t)] for k, (d, t) in res.items()],
                   ["check", "max_deviation", "tolerance"])
    if not ok:
        raise NumericFailureError("attention oracle suite failed")
    return 0


def cmd_grad_check(args):
    cfg = _prepare(args, "checks", grad_projections=args.n_proj)
    c = cfg["checks"]
    res = gradcheck.run_all(cfg["seed"], int(c["grad_projections"]))
    cap = float(c["grad_tol"])
    rows, worst, ok = [], 0.0, True
    for suite, (tol, devs) in res.items():
        tol = min(tol, cap)
        for name, dev in devs.items():
            rows.append([suite, name, _fmt(dev), _fmt(tol)])
        m = max(devs.values())
        worst = max(worst, m)
        ok &= m <= tol
        print(f"{suite:24s} {len(devs):3d} tensors  max relative deviation {m:.3e} (tol {tol:.0e})")
    print(f"max relative deviation {worst:.3e}")
    if args.out:
        _write_csv(Path(args.out) / "grad_check.csv", rows, ["suite", "tensor", "deviation", "tolerance"])
    if not ok:
        raise NumericFailureError(f"gradient check failed: max relative deviation {worst:.3e}")
    return 0


def cmd_anchor_demo(args):
    cfg = _prepare(args, "checks", sample=args.sample, consensus_size=args.consensus_size,
                   depth_noise=args.depth_noise)
    c = cfg["checks"]
    if c["sample"]:
        s = load_sample(c["sample"])
    else:
        h, w = c["demo_hw"]
        s = generate_sample(SynthConfig(n_frames=int(c["demo_frames"]), height=h, width=w), cfg["seed"])
    px = anchor_pixels(s, "a", float(c["depth_noise"]), cfg["seed"])
    res = anchor_track(px, s.cam_a, s.cam_b, int(c["consensus_size"]), cfg["seed"])
    gt = anchor_ground_truth(s, res.sample_indices, "b")
    err = float(np.linalg.norm(res.anchor2d - gt))
    print(f"frames used  {list(res.sample_indices)}")
    print(f"anchor2d     ({res.anchor2d[0]:.6f}, {res.anchor2d[1]:.6f})")
    print(f"ground truth ({gt[0]:.6f}, {gt[1]:.6f})")
    print(f"pixel error  {err:.3e}")
    if args.out:
        out = Path(args.out)
        io.write_json(out / "anchor.json", {"anchor2d": res.anchor2d.tolist(), "anchor3d": res.anchor3d.tolist(),
                                            "ground_truth": gt.tolist(), "pixel_error": err,
                                            "frames": list(res.sample_indices)})
        _anchor_figure(s, res, gt, out / "anchor.png")
    return 0


def _anchor_figure(s, res, gt, path):
    import matplotlib.pyplot as plt

    k = res.sample_indices[0]
    fig, (a, b) = plt.subplots(1, 2, figsize=(8, 2.6), layout="constrained")
    a.imshow(s.frames_a[k])
    a.set_title(f"view A, frame {k}", fontsize=9)
    b.imshow(s.frames_b[k])
    b.plot(*gt, "o", mfc="none", mec="C2", ms=10, label="ground truth")
    b.plot(*res.anchor2d, "x", color="C3", label="anchor")
    b.legend(fontsize=7, loc="lower right")
    b.set_title("view B", fontsize=9)
    for ax in (a, b):
        ax.set_xticks([])
        ax.set_yticks([])
    report._save(fig, path)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "warp": cmd_warp,
    "train": cmd_train,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "attn-check": cmd_attn_check,
    "grad-check": cmd_grad_check,
    "anchor-demo": cmd_anchor_demo,
}


def run(argv=None) -> int:
    try:
        _configure_logging()
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc.strerror or exc}: {exc.filename or ''}", file=sys.stderr)
        return 1
    except NumericFailureError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()

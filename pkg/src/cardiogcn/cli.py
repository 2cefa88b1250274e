"""Command-line entry point: ``cardiogcn <command> [options]``.

Failures print one JSON error record on stderr, ``{"error", "module", "message"}``,
and exit nonzero (2 usage, 3 configuration, 4 pipeline error, 1 anything else).
"""
import argparse
import json
import logging
import os
import sys

import numpy as np

from . import io
from .errors import CardioGCNError, ConfigError, InfeasibleGeometry

log = logging.getLogger("cardiogcn")

EXIT_OTHER, EXIT_USAGE, EXIT_CONFIG, EXIT_PIPELINE = 1, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _record(kind, module, message):
    return json.dumps({"error": kind, "module": module, "message": message}, sort_keys=True)


def _config(args):
    from .config import RunConfig, load_config

    return load_config(args.config) if getattr(args, "config", None) else RunConfig()


# ---------------------------------------------------------------------------
# synth

def _sample_seeds(seed, n):
    return [seed * 1_000_000 + i for i in range(n)]


def cmd_synth(args):
    from .clinical import ExamManifest, ViewRecording, exam_ef
    from .imaging import PixelSpacing
    from .keypoints import extract_keypoints, save_keypoints
    from .phantom import ExamConfig, PhantomParams, corrupt_mask, exam_frames, generate_phantom

    out = args.out
    params = PhantomParams()
    for sub in ("images", "masks", "keypoints") + (("masks_alt",) if args.corrupt else ()):
        io.ensure_dir(os.path.join(out, sub))
    rng = np.random.default_rng([args.seed, 7])
    ids, corruptions = [], {}
    next_seed = iter(_sample_seeds(args.seed, 10 * args.n + 10))
    while len(ids) < args.n:
        s = next(next_seed)
        try:
            img, mask = generate_phantom(s, params)
        except InfeasibleGeometry:
            continue
        sid = f"{len(ids):04d}"
        io.save_image(os.path.join(out, "images", sid + ".png"), img)
        io.save_mask(os.path.join(out, "masks", sid + ".png"), mask)
        save_keypoints(os.path.join(out, "keypoints", sid + ".json"), extract_keypoints(mask))
        if args.corrupt:
            kind, amount = _draw_corruption(rng)
            corruptions[sid] = {"kind": kind, "amount": amount}
            io.save_mask(os.path.join(out, "masks_alt", sid + ".png"), corrupt_mask(mask, kind, amount, s))
        ids.append(sid)
    index = {"version": 1, "seed": args.seed, "n": args.n, "samples": ids, "params": params.to_dict()}
    if args.corrupt:
        index["corruptions"] = corruptions
    if args.exams:
        ecfg = ExamConfig(spacing=args.spacing)
        edir = os.path.join(out, "exams")
        subs = ("images", "masks", "manifests") + (("masks_alt",) if args.corrupt else ())
        for sub in subs:
            io.ensure_dir(os.path.join(edir, sub))
        patients = []
        for p in range(args.exams):
            pid = args.seed * 10_000 + p
            cycles, frames = exam_frames(pid, ecfg, params)
            for fid, (img, mask) in sorted(frames.items()):
                io.save_image(os.path.join(edir, "images", fid + ".png"), img)
                io.save_mask(os.path.join(edir, "masks", fid + ".png"), mask)
                if args.corrupt:
                    kind, amount = _draw_corruption(rng)
                    io.save_mask(os.path.join(edir, "masks_alt", fid + ".png"),
                                 corrupt_mask(mask, kind, amount, int(rng.integers(2 ** 31))))
            views = {}
            for view, pairs in cycles.items():
                names = [f for pair in pairs for f in pair]
                views[view] = ViewRecording(frames=names, cycles=[(2 * k, 2 * k + 1) for k in range(len(pairs))],
                                            spacing=PixelSpacing(ecfg.spacing, ecfg.spacing))
            manifest = ExamManifest(patient_id=f"P{pid:04d}", views=views)
            segs = {v: {i: frames[f][1] for i, f in enumerate(views[v].frames)} for v in views}
            res = exam_ef(manifest, segs)
            manifest.reference = {"ef": res.mean_ef, "edv": float(np.mean(res.cycle_edv)),
                                  "esv": float(np.mean(res.cycle_esv))}
            io.write_json(os.path.join(edir, "manifests", manifest.patient_id + ".json"), manifest.to_dict())
            patients.append(manifest.patient_id)
        index["exams"] = {"patients": patients, "config": ecfg.to_dict()}
    io.write_json(os.path.join(out, "index.json"), index)
    print(f"wrote {len(ids)} phantoms" + (f" and {args.exams} exams" if args.exams else "") + f" to {out}")
    return 0


def _draw_corruption(rng):
    kind = ["none", "erode", "shift"][int(rng.integers(3))]
    amount = 0 if kind == "none" else int(rng.integers(1, 4 if kind == "erode" else 9))
    return kind, amount


# ---------------------------------------------------------------------------
# keypoint <-> mask conversion

def cmd_extract(args):
    from .keypoints import SamplingConfig, extract_keypoints, save_keypoints

    cfg = _config(args).sampling if args.config else SamplingConfig()
    io.ensure_dir(args.out)
    names = io.stems(args.masks, ".png")
    for name in names:
        kps = extract_keypoints(io.load_mask(os.path.join(args.masks, name + ".png")), cfg)
        save_keypoints(os.path.join(args.out, name + ".json"), kps)
    print(f"extracted keypoints for {len(names)} masks")
    return 0


def cmd_rasterize(args):
    from .imaging import rasterize_keypoints
    from .keypoints import load_keypoints

    io.ensure_dir(args.out)
    names = io.stems(args.keypoints, ".json")
    for name in names:
        kps = load_keypoints(os.path.join(args.keypoints, name + ".json"))
        io.save_mask(os.path.join(args.out, name + ".png"), rasterize_keypoints(kps))
    print(f"rasterized {len(names)} keypoint sets")
    return 0


# ---------------------------------------------------------------------------
# training and inference

def _load_dataset(root, names):
    from .keypoints import extract_keypoints, load_keypoints

    data = []
    for name in names:
        img = io.load_image(os.path.join(root, "images", name + ".png"))
        kp_path = os.path.join(root, "keypoints", name + ".json")
        if os.path.exists(kp_path):
            kps = load_keypoints(kp_path)
        else:
            kps = extract_keypoints(io.load_mask(os.path.join(root, "masks", name + ".png")))
        data.append((img, kps))
    return data


def cmd_train(args):
    from .gcn import GCNModel, train
    from .phantom import AugmentConfig

    cfg = _config(args)
    t = cfg.train
    epochs = args.epochs if args.epochs is not None else t.epochs
    n_train = args.n_train if args.n_train is not None else t.n_train
    n_val = args.n_val if args.n_val is not None else t.n_val
    names = io.stems(os.path.join(args.data, "images"), ".png")
    if len(names) < n_train + n_val:
        raise ConfigError(f"{args.data} holds {len(names)} samples, {n_train + n_val} requested")
    train_set = _load_dataset(args.data, names[:n_train])
    val_set = _load_dataset(args.data, names[n_train:n_train + n_val]) if n_val else None
    model = GCNModel(cfg.encoder, cfg.decoder, cfg.sampling, seed=args.seed)
    augment = cfg.augment if t.augment else AugmentConfig.identity()

    def progress(entry):
        log.info("epoch %d train %.5f val %.5f", entry["epoch"], entry["train_loss"], entry["val_loss"])

    result = train(model, train_set, epochs, seed=args.seed, adam_cfg=cfg.adam, augment_cfg=augment,
                   val_dataset=val_set, batch_size=t.batch_size, callback=progress)
    model.save(args.out)
    report = {"epochs": epochs, "seed": args.seed, "n_train": n_train, "n_val": n_val,
              "best_epoch": result.best_epoch, "best_val_loss": result.best_val_loss,
              "history": result.history, "parameters": model.parameter_count()}
    io.write_json(args.report or args.out + ".json", report)
    print(f"trained {epochs} epochs; best epoch {result.best_epoch} val loss {result.best_val_loss:.5f}")
    return 0


def cmd_infer(args):
    from .imaging import rasterize_keypoints
    from .keypoints import save_keypoints

    model = _load_model(args.weights)
    kdir = io.ensure_dir(os.path.join(args.out, "keypoints"))
    mdir = io.ensure_dir(os.path.join(args.out, "masks"))
    names = io.stems(args.images, ".png")
    for i in range(0, len(names), args.batch):
        chunk = names[i:i + args.batch]
        imgs = np.stack([io.load_image(os.path.join(args.images, n + ".png")) for n in chunk])
        for name, (kps, _) in zip(chunk, model.predict(imgs)):
            save_keypoints(os.path.join(kdir, name + ".json"), kps)
            io.save_mask(os.path.join(mdir, name + ".png"), rasterize_keypoints(kps))
    print(f"inferred {len(names)} images")
    return 0


def _load_model(path):
    from .errors import ModelLoadFailure
    from .gcn import GCNModel

    try:
        return GCNModel.load(path)
    except (OSError, ValueError, KeyError) as exc:
        raise ModelLoadFailure(f"{path}: {exc}") from None


# ---------------------------------------------------------------------------
# evaluation

def _mean(values):
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def cmd_evaluate(args):
    from .anatomy import check_keypoints, check_mask
    from .keypoints import load_keypoints
    from .metrics import metric_report

    pred_masks = os.path.join(args.pred, "masks")
    ref_masks = os.path.join(args.ref, "masks")
    pred_kps = os.path.join(args.pred, "keypoints")
    names = io.stems(pred_masks, ".png")
    missing = sorted(set(names) - set(io.stems(ref_masks, ".png")))
    if missing:
        raise ConfigError(f"reference masks missing for {missing[:5]}")
    spacing = tuple(args.spacing) if args.spacing else None
    rows, anat_rows = [], []
    for name in names:
        pred = io.load_mask(os.path.join(pred_masks, name + ".png"))
        ref = io.load_mask(os.path.join(ref_masks, name + ".png"))
        rows.append({"sample": name, **metric_report(pred, ref, spacing).to_dict()})
        kp_path = os.path.join(pred_kps, name + ".json")
        rep = check_keypoints(load_keypoints(kp_path)) if os.path.exists(kp_path) else check_mask(pred)
        anat_rows.append({"sample": name, **rep.to_dict()})
    io.ensure_dir(args.out)
    io.write_csv(os.path.join(args.out, "metrics.csv"), rows)
    io.write_csv(os.path.join(args.out, "anatomy.csv"), anat_rows)
    keys = [k for k in rows[0] if k != "sample"] if rows else []
    summary = {
        "n": len(rows),
        "mean": {k: _mean([r[k] for r in rows]) for k in keys},
        "anatomy_pass": sum(1 for r in anat_rows if r["overall"]),
        "anatomy_incorrect": sum(1 for r in anat_rows if not r["overall"]),
    }
    io.write_json(os.path.join(args.out, "summary.json"), summary)
    print(json.dumps(summary, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# ejection fraction

def _segmentation(seg_dir, fid, spacing):
    from .keypoints import load_keypoints

    kp = os.path.join(seg_dir, "keypoints", fid + ".json")
    if os.path.exists(kp):
        kps = load_keypoints(kp)
        kps.spacing = spacing
        return kps
    mk = os.path.join(seg_dir, "masks", fid + ".png")
    if os.path.exists(mk):
        return io.load_mask(mk)
    return None


def cmd_ef(args):
    from .clinical import ExamManifest, exam_ef
    from .metrics import bland_altman, inter_model_dice, mae

    mdir = os.path.join(args.exams, "manifests")
    seg_dir = args.seg or args.exams
    rows, auto, ref = [], [], []
    excluded = failed = 0
    for pid in io.stems(mdir, ".json"):
        manifest = ExamManifest.from_dict(io.read_json(os.path.join(mdir, pid + ".json")))
        segs, agree = {}, {}
        for view, rec in manifest.views.items():
            segs[view] = {i: _segmentation(seg_dir, f, rec.spacing) for i, f in enumerate(rec.frames)}
            if args.filter is not None:
                agree[view] = {}
                for i, f in enumerate(rec.frames):
                    a = io.load_mask(os.path.join(args.agree_a, f + ".png"))
                    b = io.load_mask(os.path.join(args.agree_b, f + ".png"))
                    agree[view][i] = inter_model_dice(a, b)
        try:
            res = exam_ef(manifest, segs, args.filter, agree or None)
        except CardioGCNError as exc:
            failed += 1
            rows.append({"patient": pid, "ef": None, "usable_cycles": 0, "excluded": False,
                         "reference_ef": manifest.reference.get("ef"), "error": type(exc).__name__})
            continue
        excluded += int(res.excluded)
        rows.append({"patient": pid, "ef": res.mean_ef, "usable_cycles": res.usable_cycles,
                     "excluded": res.excluded, "reference_ef": manifest.reference.get("ef"), "error": None})
        if res.mean_ef is not None and manifest.reference.get("ef") is not None:
            auto.append(res.mean_ef)
            ref.append(manifest.reference["ef"])
    io.ensure_dir(args.out)
    io.write_csv(os.path.join(args.out, "ef.csv"), rows)
    summary = {"patients": len(rows), "with_ef": len(auto), "excluded": excluded, "failed": failed,
               "filter_threshold": args.filter}
    if auto:
        # reported in percentage points
        a, r = np.asarray(auto) * 100, np.asarray(ref) * 100
        summary["mae_pct"], summary["sd_abs_err_pct"] = mae(a, r)
        if len(a) >= 2:
            summary["bland_altman_pct"] = dict(zip(("bias", "loa_low", "loa_high"), bland_altman(a, r)))
    io.write_json(os.path.join(args.out, "summary.json"), summary)
    print(f"EF for {len(auto)} of {len(rows)} patients ({excluded} excluded, {failed} failed)")
    return 0


# ---------------------------------------------------------------------------
# agreement gate

def cmd_agreement(args):
    from .agreement import histogram, make_records, partition_sample
    from .metrics import inter_model_dice

    cfg = _config(args).agreement
    names = sorted(set(io.stems(args.a, ".png")) & set(io.stems(args.b, ".png")))
    dices = [inter_model_dice(io.load_mask(os.path.join(args.a, n + ".png")),
                              io.load_mask(os.path.join(args.b, n + ".png")), args.mode) for n in names]
    records = make_records(names, dices, cfg)
    io.ensure_dir(args.out)
    io.write_csv(os.path.join(args.out, "records.csv"), [r.to_dict() for r in records],
                 ["frame_id", "inter_model_dice", "class", "retained"])
    edges, counts = histogram(dices, cfg.bin_width)
    io.write_json(os.path.join(args.out, "histogram.json"),
                  {"bin_width": cfg.bin_width, "edges": edges, "counts": counts, "n": len(dices)})
    classes = {c: sum(1 for r in records if r.cls == c) for c in ("Low", "Mid", "High")}
    if args.k_low or args.k_high:
        sample = partition_sample(records, args.k_low, args.k_high, args.seed)
        io.write_json(os.path.join(args.out, "sample.json"), [r.to_dict() for r in sample])
    print(json.dumps({"n": len(records), "classes": classes,
                      "retained": sum(r.retained for r in records)}, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# bench / gradcheck

def cmd_bench(args):
    from .bench import BenchProtocol, bench_model
    from .gcn import GCNModel

    cfg = _config(args)
    p = cfg.bench
    protocol = BenchProtocol(
        warmup_inputs=args.warmup if args.warmup is not None else p.warmup_inputs,
        test_runs=args.runs if args.runs is not None else p.test_runs,
        inputs_per_run=args.per_run if args.per_run is not None else p.inputs_per_run,
        image_size=p.image_size,
    )
    model = _load_model(args.weights) if args.weights else GCNModel(cfg.encoder, cfg.decoder, cfg.sampling,
                                                                     seed=args.seed)
    res = bench_model(model, protocol, seed=args.seed)
    if args.out:
        io.write_json(args.out, {"protocol": protocol.to_dict(), **res.to_dict()})
    print(res.row(args.name))
    return 0


SINGLE_LAYER_TOL = 1e-4
END_TO_END_TOL = 1e-3


def cmd_gradcheck(args):
    from .gradcheck import run_all

    worst = 0.0
    ok = True
    for group, errs in run_all(args.seed).items():
        e = max(errs.values())
        tol = END_TO_END_TOL if group.startswith("end_to_end") else SINGLE_LAYER_TOL
        ok &= e < tol
        worst = max(worst, e)
        print(f"{group:18s} max rel err {e:.3e}  (< {tol:g}: {'ok' if e < tol else 'FAIL'})")
    print(f"max relative error {worst:.3e}")
    return 0 if ok else EXIT_PIPELINE


# ---------------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="cardiogcn", description="Contour-keypoint cardiac segmentation toolkit.")
    p.add_argument("--log-level", default="WARNING", help="logging level (default WARNING)")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a phantom corpus (and optional exams)")
    s.add_argument("--n", type=int, required=True, help="number of phantoms")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--exams", type=int, default=0, help="number of synthetic patients with A2C/A4C exams")
    s.add_argument("--spacing", type=float, default=0.9, help="exam pixel spacing in mm")
    s.add_argument("--corrupt", action="store_true", help="also write a corrupted second mask source")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("extract-keypoints", help="masks/*.png -> keypoints/*.json")
    s.add_argument("--masks", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("rasterize", help="keypoints/*.json -> masks/*.png")
    s.add_argument("--keypoints", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_rasterize)

    s = sub.add_parser("train", help="train a GCN on a synth directory")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True, help="weights file to write")
    s.add_argument("--config")
    s.add_argument("--epochs", type=int)
    s.add_argument("--n-train", type=int)
    s.add_argument("--n-val", type=int)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--report", help="training report JSON (default: <out>.json)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("infer", help="predict keypoints and masks for images/*.png")
    s.add_argument("--weights", required=True)
    s.add_argument("--images", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--batch", type=int, default=16)
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("evaluate", help="Dice / Hausdorff / anatomy report")
    s.add_argument("--pred", required=True, help="directory with masks/ (and optionally keypoints/)")
    s.add_argument("--ref", required=True, help="directory with masks/")
    s.add_argument("--out", required=True)
    s.add_argument("--spacing", type=float, nargs=2, metavar=("SX", "SY"))
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("ef", help="biplane EF per synthetic patient")
    s.add_argument("--exams", required=True, help="exam directory with manifests/")
    s.add_argument("--seg", help="segmentation directory with keypoints/ or masks/ (default: --exams)")
    s.add_argument("--filter", type=float, help="inter-model Dice threshold for frame filtering")
    s.add_argument("--agree-a", help="first mask source for the agreement filter")
    s.add_argument("--agree-b", help="second mask source for the agreement filter")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_ef)

    s = sub.add_parser("agreement", help="inter-model agreement records, histogram and sample")
    s.add_argument("--a", required=True, help="first mask directory")
    s.add_argument("--b", required=True, help="second mask directory")
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.add_argument("--mode", default="mean", choices=("mean", "foreground", "lv"))
    s.add_argument("--k-low", type=int, default=0)
    s.add_argument("--k-high", type=int, default=0)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_agreement)

    s = sub.add_parser("bench", help="inference timing protocol")
    s.add_argument("--weights", help="weights file (default: a freshly initialised model)")
    s.add_argument("--config")
    s.add_argument("--warmup", type=int)
    s.add_argument("--runs", type=int)
    s.add_argument("--per-run", type=int)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--name", default="GCN")
    s.add_argument("--out")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("gradcheck", help="finite-difference checks of all backward passes")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(_record("UsageError", "cli", str(exc)), file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "ef" and args.filter is not None and not (args.agree_a and args.agree_b):
        print(_record("UsageError", "cli", "--filter needs --agree-a and --agree-b"), file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except ConfigError as exc:
        print(json.dumps(exc.record(), sort_keys=True), file=sys.stderr)
        return EXIT_CONFIG
    except CardioGCNError as exc:
        print(json.dumps(exc.record(), sort_keys=True), file=sys.stderr)
        return EXIT_PIPELINE
    except (OSError, ValueError, KeyError) as exc:
        print(_record(type(exc).__name__, "cli", str(exc)), file=sys.stderr)
        return EXIT_OTHER


if __name__ == "__main__":
    sys.exit(main())

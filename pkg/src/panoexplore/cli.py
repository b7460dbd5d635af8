"""Command-line entry points: synth, train, eval, explore, report.

Exit codes: 0 success, 2 configuration or input error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import harness
from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig, from_dict, load_config
from .dataset import ManifestError, SynthSpec, load_manifest, load_panorama, stack_samples, to_uint8, write_corpus
from .glimpse import crop_batch
from .memory import FitInMatrix, matrix_write
from .nets import PROFILES, VGGClassifier, get_profile
from .trainer import TrainConfig, build_model, load_model, masked_probs, run_episode, train, transfer

log = logging.getLogger("panoexplore")

EXIT_CONFIG = 2
EXIT_RUNTIME = 3


class OutputLocked(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# configuration plumbing


def _overrides(args) -> dict:
    """Map command-line flags onto the JSON config layout."""
    flat = {
        "profile": ("profile",),
        "seed": ("seed",),
        "out": ("out",),
        "manifest": ("data", "manifest"),
        "limit": ("data", "limit"),
        "count": ("synth", "count"),
        "test_every": ("synth", "test_every"),
        "epochs": ("train", "epochs"),
        "batch_size": ("train", "batch_size"),
        "lr": ("train", "lr"),
        "train_glimpses": ("train", "glimpses"),
        "classification": ("train", "classification"),
        "checkpoint_every": ("train", "checkpoint_every"),
        "resume": ("resume",),
        "init": ("init",),
        "policy": ("eval", "policies"),
        "eval_glimpses": ("eval", "glimpses"),
        "eval_seeds": ("eval", "seeds"),
        "reference": ("eval", "reference"),
        "eval_checkpoint": ("eval", "checkpoint"),
        "explore_checkpoint": ("explore", "checkpoint"),
        "image": ("explore", "image"),
        "explore_glimpses": ("explore", "glimpses"),
    }
    out: dict = {}
    for attr, path in flat.items():
        value = getattr(args, attr, None)
        if value is None or value is False:
            continue
        node = out
        for key in path[:-1]:
            node = node.setdefault(key, {})
        node[path[-1]] = value
    return out


def _merge(base: dict, extra: dict) -> dict:
    merged = dict(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(merged.get(k), dict):
            merged[k] = _merge(merged[k], v)
        else:
            merged[k] = v
    return merged


def resolve_config(args) -> RunConfig:
    base = json.loads(load_config(args.config).to_json()) if args.config else {}
    return from_dict(_merge(base, _overrides(args)))


def _require(value, name):
    if value is None:
        raise ConfigError(f"{name} is required")
    return value


@contextmanager
def output_dir(path):
    """Create `path` and hold an exclusive lock file in it."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    lock = path / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise OutputLocked(f"{path} is in use by another process (remove {lock} if stale)") from None
    os.write(fd, str(os.getpid()).encode())
    os.close(fd)
    try:
        yield path
    finally:
        lock.unlink(missing_ok=True)


def _save_config(cfg: RunConfig, out: Path):
    (out / "config.json").write_text(cfg.to_json())


def load_split(cfg: RunConfig, split: str, profile_name: str):
    manifest = load_manifest(_require(cfg.data.manifest, "data.manifest (--manifest)"))
    entries = manifest.split(split)
    if cfg.data.limit is not None:
        entries = entries[: cfg.data.limit]
    if not entries:
        raise ConfigError(f"split {split!r} of {cfg.data.manifest} is empty")
    h, w = get_profile(profile_name).image_size
    return stack_samples([load_panorama(e, manifest.root) for e in entries], h, w)


def _load_checkpoint(path, cfg: RunConfig, explicit_profile):
    model, header, _ = load_model(path)
    profile = header["profile"]
    if explicit_profile and explicit_profile != profile:
        raise ConfigError(f"--profile {explicit_profile} does not match checkpoint profile {profile}")
    cfg.profile = profile
    return model


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    cfg = resolve_config(args)
    out = Path(_require(cfg.out, "--out"))
    spec = SynthSpec(count=cfg.synth.count, seed=cfg.seed)
    with output_dir(out):
        manifest = write_corpus(out, spec, test_every=cfg.synth.test_every)
        _save_config(cfg, out)
    print(f"wrote {len(manifest.entries)} panoramas to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    out = Path(_require(cfg.out, "--out"))
    tc = cfg.train_config()
    model = None
    if cfg.init and cfg.resume:
        raise ConfigError("init and resume are mutually exclusive")
    if cfg.init:
        base = _load_checkpoint(cfg.init, cfg, args.profile)
        if isinstance(base, VGGClassifier) or tc.classification in ("off", "upper-bound"):
            raise ConfigError("init transfers an exploration checkpoint into a from-recon or from-vector run")
        tc = cfg.train_config()
        model = transfer(base, tc.classification, tc.seed)
    imgs, labels = load_split(cfg, cfg.data.train_split, tc.profile)
    with output_dir(out):
        _save_config(cfg, out)
        res = train(tc, imgs, labels, out_dir=out, resume=cfg.resume, model=model)
    print(f"trained {res.iteration} iterations; final checkpoint {out / 'checkpoint_final.pxck'}")
    return 0


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    out = Path(_require(cfg.out, "--out"))
    ev = cfg.eval
    if ev.checkpoint:
        model = _load_checkpoint(ev.checkpoint, cfg, args.profile)
    elif "learned" in ev.policies:
        raise ConfigError("the learned policy needs a checkpoint (--checkpoint)")
    else:
        log.warning("no checkpoint: reconstructions come from an untrained network")
        model = build_model(TrainConfig(profile=cfg.profile, seed=cfg.seed))
    imgs, labels = load_split(cfg, cfg.data.eval_split, cfg.profile)
    labeled = bool((labels >= 0).all())
    if isinstance(model, VGGClassifier) and not labeled:
        raise ConfigError("upper-bound checkpoints need a labeled evaluation split")
    with output_dir(out):
        _save_config(cfg, out)
        if isinstance(model, VGGClassifier):
            acc = harness.classification_accuracy(model, imgs, labels, "upper-bound", batch_size=ev.batch_size)
            (out / "accuracy.json").write_text(json.dumps({"mode": "upper-bound", "accuracy": acc}) + "\n")
            print(f"upper-bound accuracy {acc:.4f}")
            return 0
        seeds = list(range(ev.seeds))
        reports = [harness.evaluate(model, imgs, p, ev.glimpses, seeds, ev.batch_size) for p in ev.policies]
        harness.write_curves(reports, out / "curves.csv")
        table = harness.format_table(reports, reference=ev.reference)
        (out / "table.txt").write_text(table)
        if model.classification != "off" and labeled:
            acc = harness.classification_accuracy(
                model, imgs, labels, model.classification, ev.glimpses, seeds, ev.batch_size
            )
            (out / "accuracy.json").write_text(json.dumps({"mode": model.classification, "accuracy": acc}) + "\n")
    print(table, end="")
    return 0


def heatmap_image(dist: np.ndarray, rows: int, cols: int, size=(128, 256)) -> np.ndarray:
    """Patch probabilities as a grayscale image, linear over [0, max]."""
    grid = np.asarray(dist, dtype=np.float64).reshape(rows, cols)
    top = grid.max()
    grid = grid / top if top > 0 else np.zeros_like(grid)
    img = np.kron(grid, np.ones((size[0] // rows, size[1] // cols)))
    return np.rint(img * 255).astype(np.uint8)


def footprint_overlay(pano: torch.Tensor, seen: torch.Tensor, current: torch.Tensor) -> np.ndarray:
    """Dim unobserved pixels and outline the current glimpse footprint in red."""
    img = pano.clone()
    img = torch.where(seen, img, img * 0.35)
    inner = current.clone()
    for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
        inner &= torch.roll(current, (dy, dx), (-2, -1))
    edge = (current & ~inner).expand_as(img).clone()
    red = torch.tensor([1.0, 0.0, 0.0]).view(3, 1, 1).expand_as(img)
    img = torch.where(edge, red, img)
    return to_uint8(img.permute(1, 2, 0).numpy())


def _coverage(centers, grid, shape):
    m = FitInMatrix.zeros(1, grid)
    for c in centers:
        c = torch.tensor([int(c)])
        ones, valid = crop_batch(torch.ones(shape), c, grid)
        m = matrix_write(m, ones, c, valid, grid)
    return m.occupancy[0]


def cmd_explore(args) -> int:
    cfg = resolve_config(args)
    out = Path(_require(cfg.out, "--out"))
    ex = cfg.explore
    model = _load_checkpoint(_require(ex.checkpoint, "explore.checkpoint (--checkpoint)"), cfg, args.profile)
    if isinstance(model, VGGClassifier):
        raise ConfigError("explore needs an exploration checkpoint, not a full-image classifier")
    sample = load_panorama(_require(ex.image, "explore.image (--image)"))
    p = model.profile
    grid = p.grid
    if ex.glimpses > grid.patch_count:
        raise ConfigError(f"explore.glimpses exceeds {grid.patch_count} patches")
    pano, _ = stack_samples([sample], *p.image_size)
    model.eval()
    with torch.no_grad():
        res = run_episode(model, pano, ex.glimpses, np.random.default_rng(cfg.seed), mode="eval", record=True)
    T = ex.glimpses
    traj = res.trajectory[0].tolist()
    final_visited = torch.zeros(1, grid.patch_count, dtype=torch.bool)
    final_visited[0, traj] = True
    nexts = [res.step_probs[t][0] for t in range(1, T)]
    if bool(final_visited.all()):
        nexts.append(torch.softmax(res.final_logits[0].double(), 0))
    else:
        nexts.append(masked_probs(res.final_logits, final_visited)[0])

    with output_dir(out):
        _save_config(cfg, out)
        steps = []
        for t in range(T):
            tag = f"{t + 1:02d}"
            recon = res.step_recons[t][0]
            Image.fromarray(to_uint8(recon.permute(1, 2, 0).numpy())).save(out / f"recon_{tag}.png")
            dist = nexts[t].numpy()
            Image.fromarray(heatmap_image(dist, grid.rows, grid.cols)).save(out / f"heatmap_{tag}.png")
            seen = _coverage(traj[: t + 1], grid, pano.shape)
            now = _coverage(traj[t : t + 1], grid, pano.shape)
            Image.fromarray(footprint_overlay(pano[0], seen, now)).save(out / f"footprint_{tag}.png")
            steps.append(
                {
                    "step": t + 1,
                    "patch": traj[t],
                    "col": traj[t] % grid.cols,
                    "row": traj[t] // grid.cols,
                    "attention": [float(x) for x in dist],
                    "local_loss": float(res.step_local[t][0]),
                    "mse": float(harness.mse_metric(recon[None], pano)[0]),
                    "recon": f"recon_{tag}.png",
                    "heatmap": f"heatmap_{tag}.png",
                    "footprint": f"footprint_{tag}.png",
                }
            )
        trace = {
            "image": str(ex.image),
            "checkpoint": str(ex.checkpoint),
            "profile": p.name,
            "seed": cfg.seed,
            "glimpses": T,
            "steps": steps,
        }
        (out / "trace.json").write_text(json.dumps(trace, indent=1) + "\n")
    print(f"wrote {T}-step trace to {out / 'trace.json'}")
    return 0


def cmd_report(args) -> int:
    reports = []
    for path in args.curves:
        try:
            reports += harness.read_curves(path)
        except OSError as e:
            raise ConfigError(f"cannot read {path}: {e.strerror}") from None
        except (KeyError, ValueError) as e:
            raise ConfigError(f"{path}: not a curves CSV ({e})") from None
    table = harness.format_table(reports, reference=args.reference)
    if args.out:
        with output_dir(args.out) as out:
            (out / "table.txt").write_text(table)
    print(table, end="")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="panoexplore", description="Active exploration of 360-degree panoramas.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--profile", choices=sorted(PROFILES))

    p = sub.add_parser("synth", help="write a synthetic panorama corpus")
    common(p)
    p.add_argument("--count", type=int)
    p.add_argument("--test-every", type=int, help="every k-th panorama goes to the test split")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the exploration network")
    common(p)
    p.add_argument("--manifest")
    p.add_argument("--limit", type=int, help="use only the first N panoramas")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--glimpses", dest="train_glimpses", type=int)
    p.add_argument("--classification", choices=["off", "from-recon", "from-vector", "upper-bound"])
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--init", help="exploration checkpoint to transfer into a classification run")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate policies and write reconstruction curves")
    common(p)
    p.add_argument("--manifest")
    p.add_argument("--limit", type=int)
    p.add_argument("--checkpoint", dest="eval_checkpoint")
    p.add_argument("--policy", action="append", choices=harness.POLICY_KINDS)
    p.add_argument("--glimpses", dest="eval_glimpses", type=int)
    p.add_argument("--eval-seeds", type=int, help="number of seeds per image")
    p.add_argument("--reference", action="store_true", help="include published reference rows")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("explore", help="export a per-step trace of one exploration episode")
    common(p)
    p.add_argument("--checkpoint", dest="explore_checkpoint")
    p.add_argument("--image")
    p.add_argument("--glimpses", dest="explore_glimpses", type=int)
    p.set_defaults(func=cmd_explore)

    p = sub.add_parser("report", help="render the results table from curves CSV files")
    p.add_argument("curves", nargs="+")
    p.add_argument("--reference", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ManifestError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (OutputLocked, CheckpointError, RuntimeError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

"""Command line: ``sdtrack {track,eval,prior,synth,selftest}``.

Exit status is 0 on success, 1 for invalid input (bad config, missing or
malformed files) and 2 for failures while running.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .core import TrackerConfig
from .features import FileProvider, StandInProvider
from .harness import SyntheticSpec, Trace, evaluate, load_sequence, run_tracker, save_sequence, synthesize
from .prior import PriorModel, dump_prior_debug
from .tracker import ABLATIONS

log = logging.getLogger("sdtrack")


class UsageError(Exception):
    pass


def _config(args):
    cfg = TrackerConfig.load(args.config) if getattr(args, "config", None) else TrackerConfig()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _provider(spec, cfg):
    if spec in (None, "stand-in", "standin"):
        return StandInProvider(2 * cfg.heat_size, cfg.heat_size)
    if spec.startswith("file:"):
        return FileProvider(spec[5:], size=cfg.heat_size)
    raise UsageError(f"unknown provider {spec!r}; use 'stand-in' or 'file:<path>'")


def cmd_track(args):
    cfg = _config(args)
    ds = load_sequence(args.seq_dir, require_gt=False)
    if not ds.color:
        log.info("grayscale sequence: prior stage bypassed")
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    trace = run_tracker(ds, cfg, args.ablation, _provider(args.provider, cfg), args.dump_maps)
    trace.write(out / "trace.jsonl")
    msg = f"{ds.name}: {len(trace.records)} frames in {trace.elapsed:.1f}s"
    if ds.has_full_gt:
        rep = evaluate(trace, ds)
        (out / "report.json").write_text(json.dumps(rep.to_dict(), indent=2, sort_keys=True))
        msg += (f", OR {rep.overlap:.3f}, CE {rep.center_error:.1f}px, "
                f"success {rep.success:.3f}, precision {rep.precision:.3f}")
    print(msg)


def cmd_eval(args):
    trace = Trace.read(args.trace)
    ds = load_sequence(args.seq_dir)
    rep = evaluate(trace, ds)
    text = json.dumps(rep.to_dict(), indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text)
    print(f"{ds.name}: OR {rep.overlap:.3f}, CE {rep.center_error:.1f}px, "
          f"success {rep.success:.3f}, precision {rep.precision:.3f}")


def cmd_prior(args):
    cfg = _config(args)
    ds = load_sequence(args.seq_dir, require_gt=False)
    if not ds.color:
        raise UsageError("prior map requires 3 channels")
    k = args.frame
    if not 1 <= k <= len(ds):
        raise UsageError(f"--frame must be in [1, {len(ds)}]")
    model = PriorModel.fit(ds.frame(0), ds.gt[0], cfg)
    last = ds.gt[k - 2] if k >= 2 and len(ds.gt) >= k - 1 else ds.gt[0]
    decision, smap, cands = model.analyse(ds.frame(k - 1), last)
    side = dump_prior_debug(args.out, k, smap, cands, decision)
    print(json.dumps(side, indent=2))


def cmd_synth(args):
    spec = SyntheticSpec.from_dict(json.loads(Path(args.spec).read_text()))
    ds = synthesize(spec)
    save_sequence(ds, args.out_dir)
    print(f"wrote {len(ds)} frames to {args.out_dir}")


def cmd_selftest(args):
    from .selftest import run_selftest

    if not run_selftest(args.seed or 0):
        raise RuntimeError("selftest failed")


def build_parser():
    p = argparse.ArgumentParser(prog="sdtrack", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("track", help="track a sequence from its first ground-truth box")
    t.add_argument("seq_dir")
    t.add_argument("--config")
    t.add_argument("--ablation", default="full", choices=sorted(ABLATIONS))
    t.add_argument("--dump-maps", metavar="DIR")
    t.add_argument("--seed", type=int)
    t.add_argument("--provider", default="stand-in", help="'stand-in' or 'file:<path>'")
    t.add_argument("--out", help="output directory (default: current)")
    t.set_defaults(func=cmd_track)

    e = sub.add_parser("eval", help="score a trace against ground truth")
    e.add_argument("trace")
    e.add_argument("seq_dir")
    e.add_argument("--out", help="write the report JSON here")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("prior", help="dump prior-map debug images for one frame")
    r.add_argument("seq_dir")
    r.add_argument("--frame", type=int, required=True)
    r.add_argument("--config")
    r.add_argument("--out", default="prior_debug")
    r.set_defaults(func=cmd_prior)

    s = sub.add_parser("synth", help="render a synthetic sequence from a JSON spec")
    s.add_argument("spec")
    s.add_argument("out_dir")
    s.set_defaults(func=cmd_synth)

    st = sub.add_parser("selftest", help="run the built-in oracle checks")
    st.add_argument("--seed", type=int)
    st.set_defaults(func=cmd_selftest)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (UsageError, ValueError, FileNotFoundError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())

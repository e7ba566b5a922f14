"""Command-line pipeline: collect -> pretrain -> train -> merge -> eval -> explain (+ diagnose, demo).

Every stage reads its inputs from and writes its artifact into the output
directory, next to a ``<artifact>.manifest.json`` recording the config hash,
the seed, input hashes and the package version.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import __version__, container
from . import demonstrations as demos
from .config import PipelineConfig, describe_keys, load_config, substream_seed
from .corridor import BadExpert, CorridorEnv
from .diagnostics import jump_weight_violations, run_diagnosis, select_probes
from .errors import ConfigurationError, DependencyError, ProtoXError
from .evaluation import evaluate, fidelity
from .explanation import explain, importance_map, nearest_overlay, render_report, source_state
from .model import ProtoXModel, init_model
from .pretrain import Encoder, encode_dataset, pretrain_encoder, separation_stats
from .training import merge_prototypes, train_bc

log = logging.getLogger("protox")

STAGES = ("collect", "pretrain", "train", "merge", "eval", "explain", "diagnose")


@dataclass
class Context:
    cfg: PipelineConfig
    seed: int
    out: Path
    force: bool

    def path(self, name: str) -> Path:
        return self.out / name

    def require(self, name: str, hint: str) -> Path:
        p = self.path(name)
        if not p.exists():
            raise DependencyError(f"missing upstream artifact {p} (run `protox {hint}` first)")
        return p

    def claim(self, name: str) -> Path:
        p = self.path(name)
        if p.exists() and not self.force:
            raise ConfigurationError(f"{p} already exists; pass --force to overwrite it")
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def manifest(self, name: str, command: str, inputs: list[str], sha: str | None = None, **extra) -> None:
        art = self.path(name)
        if sha is None and art.is_file():
            sha = container.sha256_file(art)
        record = {
            "artifact": name,
            "sha256": sha,
            "command": command,
            "seed": self.seed,
            "config_hash": self.cfg.hash(),
            "config": self.cfg.to_dict(),
            "inputs": {i: container.sha256_file(self.path(i)) for i in inputs},
            "version": __version__,
            **extra,
        }
        self.path(name + ".manifest.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")


def _episode_env(ctx: Context):
    return lambda s: CorridorEnv(ctx.cfg.corridor(seed=s))


def cmd_collect(ctx: Context) -> None:
    paths = [ctx.claim(n) for n in ("dataset.ptxd", "train.ptxd", "test.ptxd")]
    d = ctx.cfg.data
    ds = demos.collect(_episode_env(ctx), ctx.cfg.expert(), d.n_pairs, substream_seed(ctx.seed, "collect"), d.stack_depth)
    train, test = demos.split(ds, d.train_fraction, substream_seed(ctx.seed, "split"))
    for p, part in zip(paths, (ds, train, test)):
        sha = demos.save(part, p)
        ctx.manifest(p.name, "collect", [], sha, n_states=len(part), n_episodes=len(part.episode_ids))
    print(f"collected {len(ds)} states in {len(ds.episode_ids)} episodes; train {len(train)}, test {len(test)}")


def cmd_pretrain(ctx: Context) -> None:
    train = demos.load(ctx.require("train.ptxd", "collect"))
    test = demos.load(ctx.require("test.ptxd", "collect"))
    out = ctx.claim("encoder.ptxe")
    cfg = ctx.cfg
    encoder, history = pretrain_encoder(
        train,
        cfg.encoder_config(),
        cfg.miner_config(),
        cfg.pretrain_config(substream_seed(ctx.seed, "pretrain")),
        on_epoch=lambda row: log.info("pretrain %s", row),
    )
    stats = separation_stats(encoder, test, cfg.miner_config(), seed=substream_seed(ctx.seed, "separation"))
    sha = encoder.save(out)
    ctx.manifest(out.name, "pretrain", ["train.ptxd", "test.ptxd"], sha, history=history, separation=stats)
    print(
        f"encoder saved; held-out anchor-positive {stats['anchor_positive']:.3f} "
        f"vs anchor-near-negative {stats['anchor_near_negative']:.3f}"
    )


def _train_head(ctx: Context, train, encoder: Encoder, stream: str) -> tuple[ProtoXModel, dict]:
    t = ctx.cfg.train
    latents = encode_dataset(encoder, train)
    model = init_model(
        latents, train.actions, train.action_set, t.initial_K, substream_seed(ctx.seed, stream + "-init"), t.beta, encoder
    )
    model.dataset_hash = train.content_hash()
    return train_bc(
        model,
        latents,
        train.actions,
        train.index,
        ctx.cfg.objective_weights(),
        ctx.cfg.train_config(substream_seed(ctx.seed, stream)),
        on_epoch=lambda row: log.info("train %s", row),
    )


def cmd_train(ctx: Context) -> None:
    train = demos.load(ctx.require("train.ptxd", "collect"))
    encoder = Encoder.load(ctx.require("encoder.ptxe", "pretrain"))
    out = ctx.claim("model_unmerged.ptxm")
    model, history = _train_head(ctx, train, encoder, "train")
    sha = model.save(out)
    ctx.manifest(out.name, "train", ["train.ptxd", "encoder.ptxe"], sha, projections=history["projections"],
                 final_epoch=history["epochs"][-1])
    print(f"trained {model.n_prototypes} prototypes; final loss {history['epochs'][-1]['total']:.4f}")


def cmd_merge(ctx: Context) -> None:
    model = ProtoXModel.load(ctx.require("model_unmerged.ptxm", "train"))
    out = ctx.claim("model.ptxm")
    merged, report = merge_prototypes(model)
    sha = merged.save(out)
    ctx.manifest(out.name, "merge", ["model_unmerged.ptxm"], sha, before=report.before, after=report.after)
    print(f"merged {report.before} -> {report.after} prototypes")


def cmd_eval(ctx: Context) -> None:
    model = ProtoXModel.load(ctx.require("model.ptxm", "merge"))
    test = demos.load(ctx.require("test.ptxd", "collect"))
    out = ctx.claim("eval.json")
    report = evaluate(model, test)
    out.write_text(report.to_json() + "\n")
    ctx.manifest(out.name, "eval", ["model.ptxm", "test.ptxd"])
    print(report.table())


def _spread(rows: np.ndarray, n: int) -> np.ndarray:
    if len(rows) <= n:
        return rows
    return rows[np.linspace(0, len(rows) - 1, n).round().astype(int)]


def cmd_explain(ctx: Context) -> None:
    model = ProtoXModel.load(ctx.require("model.ptxm", "merge"))
    train = demos.load(ctx.require("train.ptxd", "collect"))
    test = demos.load(ctx.require("test.ptxd", "collect"))
    out = ctx.claim("report")
    e = ctx.cfg.explain
    rows = _spread(test.flip_rows(), e.n_states)
    explanations, maps = [], []
    for r in rows:
        exp = explain(model, test.state(int(r)), top_k=e.top_k, dataset=train)
        top = exp.contributions[0]
        src = source_state(train, top.source)
        imap = importance_map(model, exp.input_state, top.prototype_id, src, e.patch_size, e.stride,
                              e.mask_value, e.keep_fraction, dataset=train)
        explanations.append(exp)
        maps.append((imap, src[0]))
    overlays = []
    if len(rows):
        n = min(e.overlay_n, len(train.unique_states()[0]))
        latents = encode_dataset(model.encoder, train)
        probe = test.state(int(rows[0]))
        overlays = [
            (f"{n} nearest states to state 0 by f(x)", nearest_overlay(model.encoder, probe, train, n, False, latents=latents)),
            (f"{n} nearest states to state 0 by A f(x)", nearest_overlay(model, probe, train, n, True, latents=latents)),
        ]
    render_report(explanations, maps, out, overlays)
    ctx.manifest("report", "explain", ["model.ptxm", "train.ptxd", "test.ptxd"],
                 container.sha256_file(out / "report.html"), n_states=len(rows))
    print(f"report written to {out / 'report.html'}")


def cmd_diagnose(ctx: Context) -> None:
    good = ProtoXModel.load(ctx.require("model.ptxm", "merge"))
    train = demos.load(ctx.require("train.ptxd", "collect"))
    test = demos.load(ctx.require("test.ptxd", "collect"))
    targets = [ctx.claim(n) for n in ("bad_train.ptxd", "bad_test.ptxd", "bad_model.ptxm", "diagnosis.json", "diagnosis")]
    cfg = ctx.cfg
    bad_ds = demos.collect(_episode_env(ctx), BadExpert(cfg.env.lookahead), cfg.data.n_pairs,
                           substream_seed(ctx.seed, "collect-bad"), cfg.data.stack_depth)
    bad_train, bad_test = demos.split(bad_ds, cfg.data.train_fraction, substream_seed(ctx.seed, "split-bad"))
    # the bad agent's explainer reuses the good agent's frozen encoder
    bad, _ = _train_head(ctx, bad_train, good.encoder, "train-bad")
    bad, _ = merge_prototypes(bad)
    demos.save(bad_train, targets[0])
    demos.save(bad_test, targets[1])
    bad.save(targets[2])

    env_cfg = cfg.corridor()
    e = cfg.explain
    probes = _spread(select_probes(test), e.n_probes)
    bundles = [
        run_diagnosis(good, bad, test.state(int(r)), train, bad_train, env_cfg, name=f"probe{i}",
                      patch_size=e.patch_size, stride=e.stride, keep_fraction=e.keep_fraction,
                      mask_value=e.mask_value, top_k=e.top_k)
        for i, r in enumerate(probes)
    ]
    summary = {
        "bad_fidelity": fidelity(bad, bad_test),
        "bad_prototypes": bad.n_prototypes,
        "bad_positive_jump_weights": int(len(jump_weight_violations(bad))),
        "n_probes": len(bundles),
        "good_localization_rate": float(np.mean([b.good.localized for b in bundles])) if bundles else float("nan"),
        "probes": [
            {
                "row": int(r),
                "good_action": b.good.explanation.action_name,
                "bad_action": b.bad.explanation.action_name,
                "good_prototype": b.good.top.prototype_id,
                "bad_prototype": b.bad.top.prototype_id,
                "bad_prototype_source_action": bad.action_set[b.bad.source_action],
                "good_localized": b.good.localized,
            }
            for r, b in zip(probes, bundles)
        ],
    }
    targets[3].write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    render_report([], [], targets[4], sections=[(b.section_html, b.images) for b in bundles], title="Diagnosis")
    inputs = ["model.ptxm", "train.ptxd", "test.ptxd"]
    for t in targets[:4]:
        ctx.manifest(t.name, "diagnose", inputs)
    ctx.manifest("diagnosis", "diagnose", inputs, container.sha256_file(targets[4] / "report.html"))
    print(
        f"bad-agent fidelity {summary['bad_fidelity']:.3f}; positive JUMP weights {summary['bad_positive_jump_weights']}; "
        f"good localization {summary['good_localization_rate']:.2f} over {len(bundles)} probes"
    )


COMMANDS = {
    "collect": cmd_collect,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "merge": cmd_merge,
    "eval": cmd_eval,
    "explain": cmd_explain,
    "diagnose": cmd_diagnose,
}


def cmd_demo(ctx: Context) -> None:
    for stage in STAGES:
        print(f"== {stage}")
        COMMANDS[stage](ctx)


COMMANDS["demo"] = cmd_demo


def build_parser() -> argparse.ArgumentParser:
    keys = "configuration keys (set in a TOML file under [section] or with --set section.key=value):\n" + describe_keys()
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="TOML configuration file")
    common.add_argument("--seed", type=int, default=0, help="global seed; each stage derives a named substream (default 0)")
    common.add_argument("--workers", type=int, default=None, help="cap on torch CPU threads")
    common.add_argument("--out", metavar="DIR", help="artifact directory (overrides paths.out)")
    common.add_argument("--force", action="store_true", help="overwrite existing artifacts instead of refusing")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE")
    common.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    parser = argparse.ArgumentParser(
        prog="protox",
        description="Prototype-based explanations of a behaviour-cloned corridor agent.",
        epilog=keys,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"protox {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    helps = {
        "collect": "roll out the scripted expert and write dataset/train/test splits",
        "pretrain": "train the contrastive VAE encoder",
        "train": "behaviour-clone the prototype head on frozen latents",
        "merge": "merge prototypes that share a source state",
        "eval": "fidelity, flip-point sensitivity and complexity on the test split",
        "explain": "render an HTML report for a few test states",
        "diagnose": "train an agent that never jumps and contrast its explanations",
        "demo": "run every stage in order",
    }
    for name, text in helps.items():
        sub.add_parser(name, parents=[common], help=text, description=text, epilog=keys,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args.config, args.overrides)
        if args.workers is not None:
            if args.workers < 1:
                raise ConfigurationError("--workers must be >= 1")
            torch.set_num_threads(args.workers)
        out = Path(args.out or cfg.paths.out)
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](Context(cfg, args.seed, out, args.force))
    except ProtoXError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

"""Command-line entry point: ``respcvae {generate,train,eval,filter}``.

Every command reads one run configuration (YAML or JSON) plus flag
overrides and archives the resolved configuration beside its outputs.

Exit codes: 0 success, 2 validation errors (bad config, input or
checkpoint), 3 numeric failures (solver or non-finite results), 4 I/O
errors.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys

import numpy as np

from . import config as config_mod
from . import evaluation as ev
from .barrier import pair_list
from .data.corridor import corridor_states, corridor_u_des, gen_corridor_dataset, make_scenes
from .data.dataset import load_dataset, save_dataset
from .data.intersection import gen_intersection_dataset, min_pair_distance
from .dynamics import step_arrays
from .errors import CheckpointVersionError, ConvexityError, DegenerateDerivativeError, InvalidInputError, ParseError
from .qp import OPTIMAL
from .safety_filter import ACTIVATIONS, project_batch
from .training import load_training_checkpoint, train

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERIC = 3
EXIT_IO = 4

log = logging.getLogger("respcvae")


class NumericFailure(RuntimeError):
    """A computation finished but produced unusable numbers."""


# -- helpers ---------------------------------------------------------------------
def _resolve(args) -> config_mod.RunConfig:
    cfg = config_mod.load(args.config) if args.config else config_mod.RunConfig()
    if args.seed is not None:
        cfg = config_mod.replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = config_mod.replace(cfg, out=args.out)
    if getattr(args, "samples", None) is not None:
        cfg = config_mod.replace(cfg, eval=dataclasses.replace(cfg.eval, n_samples=args.samples))
    return cfg


def _prepare_out(cfg, name):
    os.makedirs(cfg.out, exist_ok=True)
    config_mod.dump(cfg, os.path.join(cfg.out, f"{name}_config.json"))


def _print(obj):
    print(json.dumps(obj, sort_keys=True))


def _dataset_path(args, cfg):
    return args.dataset or os.path.join(cfg.out, "dataset.zip")


def _split(ds, cfg):
    if cfg.data.test_fraction == 0:
        return ds, ds
    return ds.split_by_episode(1.0 - cfg.data.test_fraction, np.random.default_rng(cfg.seed))


# -- generate --------------------------------------------------------------------------
def cmd_generate(cfg: config_mod.RunConfig):
    """Generate a dataset archive and print summary counts."""
    _prepare_out(cfg, "generate")
    rng = np.random.default_rng(cfg.seed)
    summary = {"generator": cfg.data.generator, "seed": cfg.seed}
    if cfg.data.generator == "corridor":
        ds = gen_corridor_dataset(cfg.data.corridor, cfg.data.count, cfg.filter, rng, seed=cfg.seed)
        summary["skipped"] = int(ds.meta.get("skipped", 0))
    else:
        ds, episodes = gen_intersection_dataset(cfg.data.intersection, cfg.data.episodes, rng, seed=cfg.seed,
                                                return_episodes=True)
        dmin = cfg.filter.barrier.d_min
        closest = [min_pair_distance(e) for e in episodes]
        summary.update(
            episodes=len(episodes),
            agents=int(sum(e.n_agents for e in episodes)),
            min_pair_distance=float(min(closest)),
            d_min=dmin,
            d_min_violations=int(sum(c < dmin for c in closest)),
        )
    path = os.path.join(cfg.out, "dataset.zip")
    save_dataset(path, ds)
    summary.update(count=len(ds), path=path)
    _print(summary)
    return summary


# -- train -------------------------------------------------------------------------------
def _fit(ds, model, cfg, filter_cfg, rng, checkpoint_path=None, resume=None):
    return train(ds, model, cfg.train, filter_cfg, cfg.recon, rng=rng, checkpoint_path=checkpoint_path,
                 resume=resume)


def cmd_train(cfg: config_mod.RunConfig, dataset_path, resume_path=None):
    """Train on the training split; writes ``checkpoint.zip`` and ``train_log.jsonl``."""
    _prepare_out(cfg, "train")
    ds = load_dataset(dataset_path)
    train_set, _ = _split(ds, cfg)
    rng = np.random.default_rng(cfg.seed)
    resume = load_training_checkpoint(resume_path) if resume_path else None
    if resume is not None and resume.model != cfg.model:
        raise InvalidInputError("checkpoint model configuration differs from the run configuration")
    ckpt = os.path.join(cfg.out, "checkpoint.zip")
    result = _fit(train_set, cfg.model, cfg, cfg.filter, rng, ckpt, resume)
    with open(os.path.join(cfg.out, "train_log.jsonl"), "w") as fh:
        for entry in result.history:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
    last = result.history[-1]
    if not np.isfinite(last["loss"]):
        raise NumericFailure("training loss is not finite")
    summary = {"epochs": len(result.history), "final_loss": last["loss"], "checkpoint": ckpt,
               "train_count": len(train_set)}
    _print(summary)
    return summary


# -- eval ----------------------------------------------------------------------------------
def _futures(ds, cfg):
    """Ground-truth futures: recorded ones if present, else one exact step
    with the recorded controls."""
    if "future_pos" in ds.truth:
        return ds.truth["future_pos"], ds.truth["future_valid"] & ds.agent_valid[:, None, :], cfg.eval.horizon
    pos, _ = step_arrays(ds.pos, ds.vel, ds.u, cfg.eval.dt)
    return pos[:, None], ds.agent_valid[:, None, :], 1


def _axis(ds):
    if ds.meta.get("generator") == "corridor":
        return ev.x_gap, "x_gap"
    return (lambda d: np.linalg.norm(d.vel[:, 0], axis=-1)), "ego_speed"


def _density(P, model, filter_cfg, ds, cfg, rng):
    if model.output != "gamma":
        return None
    if ds.meta.get("generator") == "corridor" and model.kind == "mlp":
        cc = cfg.data.corridor
        gaps = np.linspace(*cc.x_gap_range, 25)
        speed = np.full(len(gaps), 0.5 * sum(cc.approach_speed_range))
        pos, vel = corridor_states(gaps, np.zeros(len(gaps)), speed, speed)
        scenes = make_scenes(pos, vel, corridor_u_des(len(gaps), cc), np.zeros((len(gaps), 2, 2)))
        grid = ev.gamma_density_grid(P, model, scenes, gaps, 0, cfg.eval.bins, 200, filter_cfg, rng)
        return {"axis_variable": "x_gap", **grid.to_json()}
    sub = ds.take(np.arange(min(20, len(ds))))
    grid = ev.gamma_density_grid(P, model, sub, np.arange(len(sub)), 0, cfg.eval.bins, 200, filter_cfg, rng)
    return {"axis_variable": "scene_index", **grid.to_json()}


def _sweep_models(train_set, cfg):
    """Train the direct-control baseline and one model per activation."""
    models = {}
    direct = dataclasses.replace(cfg.model, output="u", latent="gaussian")
    res = _fit(train_set, direct, cfg, cfg.filter, np.random.default_rng(cfg.seed))
    models["direct_u"] = (res.store.arrays(), direct, cfg.filter)
    gamma_model = dataclasses.replace(cfg.model, output="gamma")
    for act in ACTIVATIONS:
        fcfg = dataclasses.replace(cfg.filter, activation=act)
        res = _fit(train_set, gamma_model, cfg, fcfg, np.random.default_rng(cfg.seed))
        models[act] = (res.store.arrays(), gamma_model, fcfg)
    return models


def _table(test_set, models, cfg):
    fut, fval, horizon = _futures(test_set, cfg)
    e = cfg.eval
    policy = e.policy
    if "future_pos" not in test_set.truth:
        policy = dataclasses.replace(policy, kind="recorded")
    rows = ev.compare_baselines(test_set, models, e.seeds, horizon, e.dt, e.n_samples, policy, e.threshold,
                                e.max_scenes, e.best_of_k, futures=(fut, fval))
    for r in rows:
        if not (np.isfinite(r["ade_mean"]) and np.isfinite(r["miss_mean"])):
            raise NumericFailure(f"{r['name']}: non-finite metrics")
    return rows


def cmd_eval(cfg: config_mod.RunConfig, dataset_path, checkpoint_path=None, ablation_sweep=False):
    """Metric table, density grid and cross-section exports on the test split."""
    _prepare_out(cfg, "eval")
    ds = load_dataset(dataset_path)
    train_set, test_set = _split(ds, cfg)
    if len(test_set) == 0:
        raise InvalidInputError("empty test split")
    if ablation_sweep:
        models = _sweep_models(train_set, cfg)
        primary = models[cfg.filter.activation]
    else:
        if not checkpoint_path:
            raise InvalidInputError("eval needs --checkpoint unless --ablation-sweep is given")
        res = load_training_checkpoint(checkpoint_path)
        name = "direct_u" if res.model.output == "u" else cfg.filter.activation
        primary = (res.store.arrays(), res.model, cfg.filter)
        models = {name: primary}
    rows = _table(test_set, models, cfg)
    ev.write_table_csv(os.path.join(cfg.out, "metrics.csv"), rows)

    rng = np.random.default_rng(cfg.seed)
    P, model, fcfg = primary
    density = _density(P, model, fcfg, test_set, cfg, rng)
    if density is not None:
        ev.write_json(os.path.join(cfg.out, "density.json"), density)
    axis_fn, axis_name = _axis(test_set)
    cross = ev.control_cross_section(test_set, 0, 0, axis_fn, P, model, fcfg, rng, n_samples=1)
    ev.write_json(os.path.join(cfg.out, "cross_section.json"), {"axis_variable": axis_name, **cross.to_json()})
    _print({"rows": rows})
    return rows


# -- filter ---------------------------------------------------------------------------------
def _load_scene(path):
    import yaml

    with open(path, encoding="utf-8") as fh:
        try:
            doc = yaml.safe_load(fh)
        except yaml.YAMLError as err:
            raise ParseError(f"scene does not parse: {err}") from None
    if not isinstance(doc, dict):
        raise ParseError("scene must be a mapping")
    try:
        pos = np.asarray(doc["pos"], dtype=float)
        vel = np.asarray(doc["vel"], dtype=float)
        ud = np.asarray(doc["u_des"], dtype=float)
        gamma = np.asarray(doc.get("gamma", np.ones(len(pos))), dtype=float)
    except KeyError as err:
        raise ParseError(f"scene is missing {err}") from None
    except (TypeError, ValueError) as err:
        raise ParseError(f"scene arrays are malformed: {err}") from None
    N = len(pos)
    if pos.shape != (N, 2) or vel.shape != (N, 2) or ud.shape != (N, 2) or gamma.shape != (N,):
        raise InvalidInputError("scene needs pos, vel, u_des of shape (N, 2) and gamma of shape (N,)")
    if N < 2:
        raise InvalidInputError("scene needs at least two agents")
    return pos, vel, ud, gamma


def cmd_filter(cfg: config_mod.RunConfig, scene_path, gamma_sweep=0):
    """Filter one scene; with ``gamma_sweep=K`` also sweep agent 0's share
    ``w`` over ``K`` values with ``gamma = [w, 1 - w, 1 - w, ...]``."""
    pos, vel, ud, gamma = _load_scene(scene_path)
    N = len(pos)
    pairs = pair_list(N)
    gammas = [gamma]
    weights = np.linspace(0.05, 0.95, gamma_sweep) if gamma_sweep else []
    for w in weights:
        gammas.append(np.concatenate([[w], np.full(N - 1, 1 - w)]))
    G = np.stack(gammas)
    K = len(G)
    fb = project_batch(np.broadcast_to(ud, (K, N, 2)), np.broadcast_to(pos, (K, N, 2)),
                       np.broadcast_to(vel, (K, N, 2)), G, cfg.filter)
    if np.any(fb.status != OPTIMAL):
        raise NumericFailure(f"filter status {fb.status.tolist()}")
    out = {
        "u": fb.u[0].tolist(),
        "epsilon": float(fb.epsilon[0]),
        "gamma": G[0].tolist(),
        "constraint_rows": len(pairs),
        "active_pairs": [list(pairs[r]) for r in np.flatnonzero(fb.active_rows[0])],
    }
    if gamma_sweep:
        dev = np.linalg.norm(fb.u[1:] - ud[None], axis=-1)
        out["sweep"] = {"w": weights.tolist(), "deviation": dev.tolist(), "epsilon": fb.epsilon[1:].tolist()}
    if cfg.out:
        os.makedirs(cfg.out, exist_ok=True)
        ev.write_json(os.path.join(cfg.out, "filter.json"), out)
    _print(out)
    return out


# -- entry point -------------------------------------------------------------------------------
def build_parser():
    parser = argparse.ArgumentParser(prog="respcvae", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", metavar="PATH")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", metavar="DIR")

    p = sub.add_parser("generate", help="generate a dataset archive")
    common(p)
    p = sub.add_parser("train", help="train a model on a dataset")
    common(p)
    p.add_argument("--dataset", metavar="PATH")
    p.add_argument("--checkpoint", metavar="PATH", help="resume from this checkpoint")
    p = sub.add_parser("eval", help="evaluate a checkpoint or run the activation sweep")
    common(p)
    p.add_argument("--dataset", metavar="PATH")
    p.add_argument("--checkpoint", metavar="PATH")
    p.add_argument("--ablation-sweep", action="store_true")
    p.add_argument("--samples", type=int)
    p = sub.add_parser("filter", help="run the safety filter on one scene file")
    common(p)
    p.add_argument("scene", metavar="SCENE")
    p.add_argument("--gamma-sweep", type=int, default=0, metavar="K")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = _resolve(args)
        if args.command == "generate":
            cmd_generate(cfg)
        elif args.command == "train":
            cmd_train(cfg, _dataset_path(args, cfg), args.checkpoint)
        elif args.command == "eval":
            cmd_eval(cfg, _dataset_path(args, cfg), args.checkpoint, args.ablation_sweep)
        else:
            cmd_filter(cfg if args.out else config_mod.replace(cfg, out=""), args.scene, args.gamma_sweep)
    except (InvalidInputError, ParseError, ConvexityError, CheckpointVersionError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_VALIDATION
    except (NumericFailure, DegenerateDerivativeError, FloatingPointError, np.linalg.LinAlgError) as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as err:
        print(f"i/o error: {err}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

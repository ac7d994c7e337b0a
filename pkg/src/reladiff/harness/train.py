"""Adversarially supervised diffusion training loop with resumable checkpoints.

Each batch: draw per-sample t ~ U{1..T} and eps, noise the target, predict
eps from [x_t, conditions], form the clean estimate, then update the
generator on total_g and the discriminator on total_d (fake detached), in
that order. One JSONL row per step; one checkpoint per epoch.
"""

from __future__ import annotations

import glob
import json
import logging
import os
from dataclasses import dataclass
from functools import partial

import numpy as np

from .. import diffusion as D
from .. import losses as L
from .. import nn
from .. import tensor as T
from ..errors import LoadError
from ..phantom import TRACERS, load_manifest, load_split
from ..volume import atomic_write_bytes, to_model_range
from .config import RunConfig
from .optim import AdamState, adam_step

log = logging.getLogger(__name__)

CHECKPOINT_KIND = "reladiff-checkpoint"
CHECKPOINT_VERSION = 1
LOG_NAME = "train_log.jsonl"


class NonFiniteLoss(RuntimeError):
    def __init__(self, message, dump_path):
        super().__init__(f"{message}; diagnostic dump at {dump_path}")
        self.dump_path = dump_path


@dataclass
class TrainState:
    gen: dict
    disc: dict
    opt_g: AdamState
    opt_d: AdamState
    rng: np.random.Generator
    epoch: int = 0  # completed epochs
    step: int = 0


# ---------------------------------------------------------------------------
# data


def training_arrays(cfg: RunConfig, samples) -> tuple[np.ndarray, np.ndarray]:
    """Model-range conditions [N, Cc, *S] and targets [N, tracers, *S].

    Only the channels switched on in the config are kept.
    """
    keep = {"t1": 0, "t2f": 1}
    chans = [keep[n] for n in cfg.cond_channels]
    cond = np.stack([to_model_range(s.condition()[chans]) for s in samples]).astype(np.float32)
    tgt = np.stack([to_model_range(np.concatenate([s.target(k) for k in range(len(TRACERS))]))
                    for s in samples]).astype(np.float32)
    if cond.shape[2:] != tuple(cfg.dims):
        raise LoadError(f"dataset dims {cond.shape[2:]} do not match config dims {tuple(cfg.dims)}")
    return cond, tgt


# ---------------------------------------------------------------------------
# state


def init_state(cfg: RunConfig) -> TrainState:
    ss = np.random.SeedSequence(cfg.seed)
    g_seed, d_seed, loop_seed = (int(s.generate_state(1)[0]) for s in ss.spawn(3))
    return TrainState(
        gen=nn.build_generator(cfg.generator_config(len(TRACERS)), g_seed),
        disc=nn.build_discriminator(cfg.discriminator_config(), d_seed),
        opt_g=AdamState(),
        opt_d=AdamState(),
        rng=np.random.default_rng(loop_seed),
    )


def checkpoint_path(out_dir, epoch: int) -> str:
    return os.path.join(out_dir, "checkpoints", f"epoch_{epoch:04d}.rdck")


def save_checkpoint(path, cfg: RunConfig, st: TrainState):
    tables = {f"gen.{k}": v for k, v in st.gen.items()}
    tables.update({f"disc.{k}": v for k, v in st.disc.items()})
    tables.update(st.opt_g.tables("adam_g"))
    tables.update(st.opt_d.tables("adam_d"))
    meta = {
        "kind": CHECKPOINT_KIND,
        "version": CHECKPOINT_VERSION,
        "config": cfg.to_dict(),
        "epoch": st.epoch,
        "step": st.step,
        "adam_g_step": st.opt_g.step,
        "adam_d_step": st.opt_d.step,
        "rng_state": st.rng.bit_generator.state,
    }
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    atomic_write_bytes(path, nn.encode_tables(tables, meta))


def load_checkpoint(path) -> tuple[RunConfig, TrainState]:
    try:
        with open(path, "rb") as fh:
            arrays, meta = nn.decode_tables(fh.read())
    except OSError as exc:
        raise LoadError(f"cannot read checkpoint {path}: {exc}") from exc
    if meta.get("kind") != CHECKPOINT_KIND:
        raise LoadError(f"{path} is not a training checkpoint")
    if meta.get("version") != CHECKPOINT_VERSION:
        raise LoadError(f"{path}: unsupported checkpoint version {meta.get('version')}")
    cfg = RunConfig.from_dict(meta["config"])

    def table(prefix):
        n = len(prefix) + 1
        return {k[n:]: T.Tensor.parameter(v) for k, v in arrays.items() if k.startswith(prefix + ".")}

    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng_state"]
    st = TrainState(
        gen=table("gen"),
        disc=table("disc"),
        opt_g=AdamState.from_tables(arrays, "adam_g", meta["adam_g_step"]),
        opt_d=AdamState.from_tables(arrays, "adam_d", meta["adam_d_step"]),
        rng=rng,
        epoch=int(meta["epoch"]),
        step=int(meta["step"]),
    )
    expected = nn.build_generator(cfg.generator_config(len(TRACERS)), 0)
    bad = {k for k in expected if k not in st.gen or st.gen[k].shape != expected[k].shape}
    if bad or len(st.gen) != len(expected):
        raise LoadError(f"{path}: generator tables do not match its config (e.g. {sorted(bad)[:3]})")
    return cfg, st


def latest_checkpoint(out_dir) -> str | None:
    paths = sorted(glob.glob(os.path.join(out_dir, "checkpoints", "epoch_*.rdck")))
    return paths[-1] if paths else None


# ---------------------------------------------------------------------------
# one step


def train_step(cfg: RunConfig, st: TrainState, sched, weights: L.LossWeights, x0_np, cond_np, c,
               rng: np.random.Generator) -> tuple[L.LossReport, np.ndarray]:
    """One generator update then one discriminator update on the same batch."""
    gcfg = cfg.generator_config(len(TRACERS))
    dfwd = partial(nn.discriminator_forward, cfg=cfg.discriminator_config())
    n = x0_np.shape[0]
    t = rng.integers(1, sched.T + 1, size=n)
    eps = T.Tensor(rng.standard_normal(x0_np.shape).astype(np.float32))
    x0 = T.Tensor(x0_np)
    x_t = D.q_sample(x0, t, eps, sched)
    eps_hat = nn.generator_forward(st.gen, x_t, T.Tensor(cond_np), nn.ConditionInfo(t, c), gcfg)
    x0_hat = D.estimate_x0(x_t, eps_hat, t, sched)

    # generator sees D as a fixed function; D sees the estimate as fixed data
    frozen = nn.detached(st.disc)
    l_rel_g, _ = L.adversarial_losses(dfwd(frozen, x0), dfwd(frozen, x0_hat), weights)
    fake = x0_hat.detach()
    _, l_rel_d = L.adversarial_losses(dfwd(st.disc, x0), dfwd(st.disc, fake), weights)
    parts = dict(l_noise=L.noise_loss(eps, eps_hat), l_image=L.image_loss(x0, x0_hat),
                 l_rel_g=l_rel_g, l_rel_d=l_rel_d)
    if weights.use_gp:
        parts["l_gp"] = L.gradient_penalty(st.disc, x0, fake, dfwd)
    report = L.combine(parts, weights)
    if L.check_finite(report):
        return report, t

    g_grads = T.backward(report.total_g)
    adam_step(st.gen, {k: g_grads[v].data for k, v in st.gen.items() if v in g_grads}, st.opt_g, cfg.lr_g)
    d_grads = T.backward(report.total_d)
    adam_step(st.disc, {k: d_grads[v].data for k, v in st.disc.items() if v in d_grads}, st.opt_d, cfg.lr_d)
    return report, t


def _dump_and_raise(cfg, st, report, batch_seed, idx, c, t):
    path = os.path.join(cfg.out_dir, f"nan_dump_step{st.step:07d}.json")
    dump = {
        "epoch": st.epoch, "step": st.step, "batch_seed": int(batch_seed),
        "subjects": [int(i) for i in idx], "tracers": [int(k) for k in c],
        "t_drawn": [int(x) for x in t], "losses": report.to_record(),
        "non_finite": L.check_finite(report),
    }
    atomic_write_bytes(path, json.dumps(dump, indent=1).encode("utf-8"))
    raise NonFiniteLoss(f"non-finite loss at step {st.step} ({', '.join(dump['non_finite'])})", path)


def _prune(out_dir, keep: int):
    if keep <= 0:
        return
    paths = sorted(glob.glob(os.path.join(out_dir, "checkpoints", "epoch_*.rdck")))
    for p in paths[:-keep]:
        os.remove(p)


def _truncate_log(path, epochs_done: int):
    if not os.path.exists(path):
        return
    with open(path) as fh:
        rows = [ln for ln in fh if ln.strip() and json.loads(ln)["epoch"] < epochs_done]
    atomic_write_bytes(path, "".join(rows).encode("utf-8"))


def train(cfg: RunConfig, resume: str | None = None, samples=None, stop_after_epochs: int | None = None,
          on_epoch=None) -> TrainState:
    """Run (or continue) training; returns the final state.

    ``resume`` is a checkpoint path (or ``"latest"``). ``samples`` bypasses the
    manifest. ``stop_after_epochs`` ends the call early, as an interruption
    would, without changing what the completed epochs contain.
    """
    cfg.validate()
    os.makedirs(cfg.out_dir, exist_ok=True)
    log_path = os.path.join(cfg.out_dir, LOG_NAME)
    if resume:
        path = latest_checkpoint(cfg.out_dir) if resume == "latest" else resume
        if path is None:
            raise LoadError(f"no checkpoint to resume from in {cfg.out_dir}")
        saved_cfg, st = load_checkpoint(path)
        if saved_cfg.to_dict() | {"epochs": cfg.epochs, "out_dir": cfg.out_dir} != cfg.to_dict():
            raise LoadError(f"{path} was written with a different configuration")
        _truncate_log(log_path, st.epoch)
        log.info("resuming from %s at epoch %d", path, st.epoch)
    else:
        st = init_state(cfg)
        if os.path.exists(log_path):
            os.remove(log_path)

    if samples is None:
        manifest, _ = load_manifest(cfg.manifest)
        if tuple(manifest["dims"]) != tuple(cfg.dims):
            raise LoadError(f"manifest dims {manifest['dims']} do not match config dims {list(cfg.dims)}")
        samples = load_split(cfg.manifest, "train")
    cond, tgt = training_arrays(cfg, samples)
    items = [(i, k) for i in range(len(samples)) for k in range(len(TRACERS))]
    sched = cfg.schedule()
    weights = L.LossWeights(cfg.lambda_adv, cfg.use_relativistic, cfg.use_gp, cfg.gp_weight)

    last = cfg.epochs if stop_after_epochs is None else min(cfg.epochs, st.epoch + stop_after_epochs)
    with open(log_path, "a") as fh:
        while st.epoch < last:
            perm = st.rng.permutation(len(items))
            for start in range(0, len(items), cfg.batch_size):
                sel = [items[j] for j in perm[start:start + cfg.batch_size]]
                idx = np.array([i for i, _ in sel])
                c = np.array([k for _, k in sel])
                batch_seed = int(st.rng.integers(2**63))
                x0 = tgt[idx, c][:, None]
                report, t = train_step(cfg, st, sched, weights, x0, cond[idx], c,
                                       np.random.default_rng(batch_seed))
                if L.check_finite(report):
                    fh.flush()
                    _dump_and_raise(cfg, st, report, batch_seed, idx, c, t)
                row = {"epoch": st.epoch, "step": st.step, "t_drawn": [int(x) for x in t],
                       "tracers": [int(x) for x in c], **report.to_record()}
                fh.write(json.dumps(row) + "\n")
                st.step += 1
            fh.flush()
            st.epoch += 1
            save_checkpoint(checkpoint_path(cfg.out_dir, st.epoch), cfg, st)
            _prune(cfg.out_dir, cfg.keep_checkpoints)
            log.info("epoch %d/%d done (step %d)", st.epoch, cfg.epochs, st.step)
            if on_epoch is not None:
                on_epoch(st)
    return st


def read_log(out_dir) -> list[dict]:
    with open(os.path.join(out_dir, LOG_NAME)) as fh:
        return [json.loads(ln) for ln in fh if ln.strip()]

"""Training loop, channel-averaged evaluation, SNR/K/variant sweeps, FLOPs tables."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import data as data_mod
from .autodiff import AdamState, Graph, NonFiniteError, Tensor, adam_step, backward
from .channel import ChannelConfig, ChannelRng, apply_channel, sample_channel, transmit
from .data import Dataset, SplitSpec
from .network import (VARIANTS, ConfigurationError, ModelParams, ModelSpec, checkpoint_bytes,
                      count_flops, forward_full, init_params, parse_checkpoint, receiver,
                      transmitter, variant_info)
from .objectives import (LOSS_NAMES, LossWeights, MetricsRecord, accuracy, joint_loss, nmse,
                         records_to_csv)

log = logging.getLogger(__name__)

DEFAULT_SNR_GRID = (0.0, 3.0, 6.0, 9.0, 12.0, 15.0, 18.0)
SEED_ENV = "SEMCOM_SEED"


class NumericAbort(RuntimeError):
    def __init__(self, epoch: int, batch: int, cause: Exception):
        super().__init__(f"non-finite value at epoch {epoch}, batch {batch}: {cause}")
        self.epoch = epoch
        self.batch = batch


# -- configuration -----------------------------------------------------------

@dataclass
class RunConfig:
    """Flat run configuration; mirrors the JSON config file one key per field."""

    variant: str = "PE-MMSC"
    K: int = 64
    encoder_widths: list[int] = field(default_factory=lambda: [64, 48, 48])
    fusion_widths: Optional[list[int]] = None
    decoder_widths: list[int] = field(default_factory=lambda: [48, 96])
    channel_kind: str = "rayleigh_awgn"
    fading_granularity: str = "per_sample"
    train_snr_db: Optional[float] = None
    train_snr_range: list[float] = field(default_factory=lambda: [0.0, 15.0])
    eval_snr_db: float = 10.0
    alpha: list[float] = field(default_factory=lambda: [0.6, 1.0, 1.0, 1.0])
    learning_rate: float = 0.001
    batch_size: int = 64
    epochs: int = 600
    checkpoint_interval: int = 0
    epoch_eval_trials: int = 1
    eval_trials: int = 20
    data_path: Optional[str] = None
    synth_classes: int = 15
    synth_per_class: int = 200
    synth_separation: float = 1.75
    synth_correlation: float = 0.5
    synth_lidar_strength: float = 0.8
    synth_nuisance_dims: int = 4
    synth_nuisance_scale: float = 3.0
    d_hsi: int = 144
    d_lidar: int = 21
    train_fraction: float = 0.8
    stratified: bool = True
    seed: int = 0
    data_seed: Optional[int] = None
    output_dir: str = "runs/default"
    beta: float = 0.5

    def validate(self) -> "RunConfig":
        variant_info(self.variant)
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ConfigurationError("batch_size must be >= 2 (batch norm)")
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be > 0")
        if self.eval_trials < 1 or self.epoch_eval_trials < 1:
            raise ConfigurationError("evaluation trial counts must be >= 1")
        if self.beta <= 0:
            raise ConfigurationError("beta must be > 0")
        if len(self.train_snr_range) != 2 or self.train_snr_range[0] > self.train_snr_range[1]:
            raise ConfigurationError("train_snr_range must be [low, high] with low <= high")
        if self.data_path is not None and not os.path.exists(self.data_path):
            raise ConfigurationError(f"data file not found: {self.data_path}")
        LossWeights(tuple(self.alpha))
        try:
            self.channel()
        except ConfigurationError:
            raise
        except ValueError as exc:
            raise ConfigurationError(str(exc)) from exc
        return self

    def channel(self, snr_db: Optional[float] = None) -> ChannelConfig:
        return ChannelConfig(kind=self.channel_kind,
                             snr_db=self.eval_snr_db if snr_db is None else snr_db,
                             seed=self.seed, fading_granularity=self.fading_granularity)

    def model_spec(self, ds: Dataset) -> ModelSpec:
        return ModelSpec(variant=self.variant, d_hsi=ds.d_hsi, d_lidar=ds.d_lidar, m=ds.m,
                         K=self.K, encoder_widths=self.encoder_widths,
                         fusion_widths=self.fusion_widths, decoder_widths=self.decoder_widths)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n"


CONFIG_KEYS = {f.name for f in dataclasses.fields(RunConfig)}


def config_from_dict(raw: dict) -> RunConfig:
    unknown = set(raw) - CONFIG_KEYS
    if unknown:
        raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
    return RunConfig(**raw)


def load_config(path, seed_flag: Optional[int] = None) -> RunConfig:
    """Read a JSON config; seed precedence is flag > SEMCOM_SEED > file."""
    if path is None:
        cfg = RunConfig()
    else:
        if not os.path.exists(path):
            raise FileNotFoundError(f"config file not found: {path}")
        with open(path, encoding="utf-8") as fh:
            try:
                raw = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigurationError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(raw, dict):
            raise ConfigurationError(f"{path}: config must be a JSON object")
        cfg = config_from_dict(raw)
    env = os.environ.get(SEED_ENV)
    if seed_flag is not None:
        cfg.seed = int(seed_flag)
    elif env not in (None, ""):
        try:
            cfg.seed = int(env)
        except ValueError:
            raise ConfigurationError(f"{SEED_ENV} must be an integer, got {env!r}") from None
    return cfg


def derive_seed(*parts: int) -> int:
    """Independent 64-bit stream key from integer parts."""
    return int(np.random.SeedSequence([int(p) & 0xFFFFFFFFFFFFFFFF for p in parts])
               .generate_state(1, np.uint64)[0])


_STREAM_CHANNEL, _STREAM_BATCH, _STREAM_EVAL, _STREAM_SNR = 1, 2, 3, 4


# -- atomic artifact writes --------------------------------------------------

def atomic_write_bytes(path, blob: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


# -- data preparation --------------------------------------------------------

def prepare_data(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    """Load or synthesize, split, then min-max with train statistics."""
    data_seed = cfg.seed if cfg.data_seed is None else cfg.data_seed
    if cfg.data_path is not None:
        ds = data_mod.load_dataset(cfg.data_path)
    else:
        ds = data_mod.synth_generate(cfg.synth_classes, cfg.synth_per_class, cfg.d_hsi,
                                     cfg.d_lidar, cfg.synth_separation, data_seed,
                                     cfg.synth_correlation,
                                     lidar_strength=cfg.synth_lidar_strength,
                                     nuisance_dims=cfg.synth_nuisance_dims,
                                     nuisance_scale=cfg.synth_nuisance_scale)
    train, test = data_mod.split(ds, SplitSpec(cfg.train_fraction, data_seed, cfg.stratified))
    return data_mod.normalize_split(train, test)


def batch_inputs(ds: Dataset, idx=None) -> tuple[dict[str, Tensor], Tensor]:
    sl = slice(None) if idx is None else idx
    return ({"hsi": Tensor(ds.hsi[sl]), "lidar": Tensor(ds.lidar[sl])}, Tensor(ds.labels[sl]))


def _loss_for(g: Graph, fwd, inputs, labels, weights: LossWeights, variant: str):
    return joint_loss(g, fwd.c_pre, fwd.c_fin, labels,
                      inputs["hsi"] if "hsi" in fwd.d_hat else None, fwd.d_hat.get("hsi"),
                      inputs["lidar"] if "lidar" in fwd.d_hat else None, fwd.d_hat.get("lidar"),
                      weights, variant)


# -- training ---------------------------------------------------------------

@dataclass
class RunArtifacts:
    output_dir: Path
    checkpoint: Path
    metrics_csv: Path
    train_loss_csv: Path
    flops_csv: Path
    config_path: Path
    spec: ModelSpec
    params: ModelParams
    history: list[MetricsRecord]
    train_loss: list[float]
    test: Dataset


def train(cfg: RunConfig, data: Optional[tuple[Dataset, Dataset]] = None,
          write: bool = True) -> RunArtifacts:
    """Joint end-to-end training through the live channel.

    Per batch: forward through encoders/fusion/channel/decoders, weighted
    multitask loss, backward, Adam. After every epoch the test split is
    evaluated at ``cfg.eval_snr_db`` and the metrics CSV is rewritten.
    """
    cfg.validate()
    train_ds, test_ds = data if data is not None else prepare_data(cfg)
    spec = cfg.model_spec(train_ds)
    params = init_params(spec, cfg.seed)
    weights = LossWeights(tuple(cfg.alpha))
    chan = cfg.channel()
    rng = ChannelRng(derive_seed(cfg.seed, _STREAM_CHANNEL))
    snr_rng = ChannelRng(derive_seed(cfg.seed, _STREAM_SNR))
    batch_seed = derive_seed(cfg.seed, _STREAM_BATCH)
    adam = AdamState(learning_rate=cfg.learning_rate)
    trainable = params.trainable()

    out = Path(cfg.output_dir)
    arts = RunArtifacts(out, out / "model.pmsc", out / "metrics.csv", out / "train_loss.csv",
                        out / "flops.csv", out / "config.resolved.json", spec, params, [], [],
                        test_ds)
    if write:
        atomic_write_text(arts.config_path, cfg.to_json())
        atomic_write_text(arts.flops_csv, flops_csv([spec]))

    loss_rows = ["epoch,joint," + ",".join(LOSS_NAMES)]
    lo, hi = cfg.train_snr_range
    for epoch in range(1, cfg.epochs + 1):
        total, comp_sum, count = 0.0, dict.fromkeys(LOSS_NAMES, 0.0), 0
        for b, idx in enumerate(data_mod.batch_iter(train_ds, cfg.batch_size, batch_seed, epoch)):
            if cfg.train_snr_db is not None:
                snr = float(cfg.train_snr_db)
            else:
                snr = lo + (hi - lo) * float(snr_rng.uniform(1)[0])
            inputs, labels = batch_inputs(train_ds, idx)
            try:
                g = Graph()
                fwd = forward_full(g, params, spec, inputs,
                                   lambda gr, s: transmit(gr, s, chan, rng, snr), train=True)
                loss, comps = _loss_for(g, fwd, inputs, labels, weights, spec.variant)
                backward(g, loss)
                adam_step(trainable, adam)
            except NonFiniteError as exc:
                raise NumericAbort(epoch, b, exc) from exc
            n = len(idx)
            total += loss.item() * n
            for k, v in comps.items():
                if v is not None:
                    comp_sum[k] += v * n
            count += n
        arts.train_loss.append(total / count)
        loss_rows.append(f"{epoch},{total / count!r}," + ",".join(
            repr(comp_sum[k] / count) for k in LOSS_NAMES))

        rec = evaluate_at(spec, params, test_ds, cfg.eval_snr_db, cfg.epoch_eval_trials,
                          seed=cfg.seed, channel=chan, weights=weights)
        rec.epoch = epoch
        arts.history.append(rec)
        if write:
            atomic_write_text(arts.metrics_csv, records_to_csv(arts.history))
            atomic_write_text(arts.train_loss_csv, "\n".join(loss_rows) + "\n")
            if cfg.checkpoint_interval and epoch % cfg.checkpoint_interval == 0:
                atomic_write_bytes(arts.checkpoint, checkpoint_bytes(spec, params))
        log.info("epoch %d loss %.5f acc@%gdB %.4f", epoch, total / count, cfg.eval_snr_db,
                 rec.accuracy)
    if write:
        atomic_write_bytes(arts.checkpoint, checkpoint_bytes(spec, params))
    return arts


def load_checkpoint(path) -> tuple[ModelSpec, ModelParams]:
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())


# -- evaluation -------------------------------------------------------------

def evaluate_at(spec: ModelSpec, params: ModelParams, ds: Dataset, snr_db: float,
                trials: int = 20, seed: int = 0, channel: Optional[ChannelConfig] = None,
                weights: Optional[LossWeights] = None, K_override: Optional[int] = None,
                rng: Optional[ChannelRng] = None) -> MetricsRecord:
    """Average accuracy, NMSE and loss terms over ``trials`` channel draws.

    Batch norm runs in eval mode. ``snr_db=inf`` means a noiseless,
    fading-free link (one trial suffices and repeats are identical).
    """
    if K_override is not None and K_override != spec.K:
        raise ConfigurationError(f"checkpoint has K={spec.K}, requested K={K_override}")
    if ds.d_hsi != spec.d_hsi or ds.d_lidar != spec.d_lidar or ds.m != spec.m:
        raise ConfigurationError(
            f"dataset dims (hsi {ds.d_hsi}, lidar {ds.d_lidar}, m {ds.m}) do not match model "
            f"(hsi {spec.d_hsi}, lidar {spec.d_lidar}, m {spec.m})")
    if trials < 1:
        raise ConfigurationError("trials must be >= 1")
    channel = channel or ChannelConfig()
    weights = weights or LossWeights()
    if rng is None:
        rng = ChannelRng(derive_seed(seed, _STREAM_EVAL, _snr_key(snr_db)))
    inputs, labels = batch_inputs(ds)
    g = Graph(track=False)
    s, c_pre, _ = transmitter(g, params, spec, inputs, train=False)
    mods = spec.info.modalities
    acc, nm = 0.0, {m: 0.0 for m in mods}
    comps_sum = dict.fromkeys(LOSS_NAMES, 0.0)
    noiseless = channel.kind == "identity" or snr_db == math.inf
    n_trials = 1 if noiseless else trials
    for _ in range(n_trials):
        h, n = sample_channel(channel, s.shape, rng, snr_db)
        s_hat = s if noiseless else apply_channel(g, s, h, n)
        c_fin, d_hat = receiver(g, params, spec, s_hat, train=False)
        acc += accuracy(c_fin.data, labels.data)
        for mod in mods:
            nm[mod] += nmse(inputs[mod].data, d_hat[mod].data)
        fwd = _Fwd(c_pre, c_fin, d_hat)
        _, comps = _loss_for(g, fwd, inputs, labels, weights, spec.variant)
        for k, v in comps.items():
            if v is not None:
                comps_sum[k] += v
    present = {k for k, v in comps.items() if v is not None}
    return MetricsRecord(
        variant=spec.variant, snr_db=float(snr_db), K=spec.K, accuracy=acc / n_trials,
        nmse_hsi=nm["hsi"] / n_trials if "hsi" in nm else None,
        nmse_lidar=nm["lidar"] / n_trials if "lidar" in nm else None,
        loss_components={k: (comps_sum[k] / n_trials if k in present else None)
                         for k in LOSS_NAMES})


@dataclass
class _Fwd:
    c_pre: Optional[Tensor]
    c_fin: Tensor
    d_hat: dict


def _snr_key(snr_db: float) -> int:
    if snr_db == math.inf:
        return 2 ** 62
    return int(round(snr_db * 1000)) & 0xFFFFFFFF


def sweep_snr(spec: ModelSpec, params: ModelParams, ds: Dataset,
              snr_list: Sequence[float] = DEFAULT_SNR_GRID, trials: int = 20, seed: int = 0,
              channel: Optional[ChannelConfig] = None,
              weights: Optional[LossWeights] = None) -> list[MetricsRecord]:
    """One record per SNR point, sorted by SNR."""
    if len(snr_list) == 0:
        raise ConfigurationError("snr_list must not be empty")
    return [evaluate_at(spec, params, ds, snr, trials, seed, channel, weights)
            for snr in sorted(float(s) for s in snr_list)]


def sweep_k(base_cfg: RunConfig, k_list: Sequence[int],
            snr_list: Sequence[float] = DEFAULT_SNR_GRID, trials: Optional[int] = None,
            allow_small_k: bool = False, write: bool = True,
            data: Optional[tuple[Dataset, Dataset]] = None) -> list[MetricsRecord]:
    """Train one model per K on identical data and seed, then sweep SNR for each."""
    data = data if data is not None else prepare_data(base_cfg.validate())
    m = data[0].m
    if not allow_small_k:
        small = [k for k in k_list if k < m]
        if small:
            raise ConfigurationError(f"K values {small} are below the class count m={m}")
    trials = base_cfg.eval_trials if trials is None else trials
    out: list[MetricsRecord] = []
    for k in k_list:
        cfg = base_cfg.replace(K=int(k), output_dir=str(Path(base_cfg.output_dir) / f"K{k}"))
        arts = train(cfg, data=data, write=write)
        out.extend(sweep_snr(arts.spec, arts.params, arts.test, snr_list, trials, cfg.seed,
                             cfg.channel(), LossWeights(tuple(cfg.alpha))))
    return out


def compare_variants(base_cfg: RunConfig, variants: Sequence[str],
                     snr_list: Sequence[float] = DEFAULT_SNR_GRID, trials: Optional[int] = None,
                     write: bool = True,
                     data: Optional[tuple[Dataset, Dataset]] = None) -> list[MetricsRecord]:
    """Train every variant on the same split and channel seed, sweep SNR for each."""
    if not variants:
        raise ConfigurationError("variant list must not be empty")
    for v in variants:
        variant_info(v)
    data = data if data is not None else prepare_data(base_cfg.validate())
    trials = base_cfg.eval_trials if trials is None else trials
    out: list[MetricsRecord] = []
    for v in variants:
        cfg = base_cfg.replace(variant=v, fusion_widths=None,
                               output_dir=str(Path(base_cfg.output_dir) / _slug(v)))
        arts = train(cfg, data=data, write=write)
        out.extend(sweep_snr(arts.spec, arts.params, arts.test, snr_list, trials, cfg.seed,
                             cfg.channel(), LossWeights(tuple(cfg.alpha))))
    return out


def _slug(variant: str) -> str:
    return variant.replace("+", "_plus_").replace("-", "_")


# -- FLOPs -------------------------------------------------------------------

def flops_report(variants: Sequence[str] = tuple(VARIANTS),
                 **overrides) -> list[tuple[str, dict]]:
    """Transmitter FLOPs per variant for a shared set of spec overrides."""
    rows = []
    for v in variants:
        spec = ModelSpec(variant=v, **overrides)
        rows.append((v, count_flops(spec)))
    return rows


def flops_csv(specs: Sequence[ModelSpec]) -> str:
    lines = ["variant,hsi,lidar,pe,fusion,total,receiver"]
    for spec in specs:
        r = count_flops(spec)
        cells = ["" if r[c] is None else str(r[c])
                 for c in ("hsi", "lidar", "pe", "fusion", "total", "receiver")]
        lines.append(",".join([spec.variant] + cells))
    return "\n".join(lines) + "\n"


def format_flops_table(rows: Sequence[tuple[str, dict]]) -> str:
    head = f"{'Variant':<12}{'HSI':>10}{'LiDAR':>10}{'PE':>8}{'Fusion':>10}{'Total':>10}"
    lines = [head, "-" * len(head)]
    for v, r in rows:
        cells = ["-" if r[c] is None else str(r[c]) for c in ("hsi", "lidar", "pe", "fusion", "total")]
        lines.append(f"{v:<12}{cells[0]:>10}{cells[1]:>10}{cells[2]:>8}{cells[3]:>10}{cells[4]:>10}")
    return "\n".join(lines)

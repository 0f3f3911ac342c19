"""Full network assembly: staged encoder, auxiliary heads, presets, checkpoints.

The encoder is split into four spans.  The shallow span predicts language
identity, which conditions later layers and routes the deep mixture of
experts.  The lower-middle span predicts discrete acoustic units at masked
frames, the upper-middle span predicts phonemes, and the deep span feeds
the token CTC head and the attention decoder.
"""

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, fields, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .ctc import ctc_loss_batch, make_lid_targets
from .data import (Batch, EOS_ID, InfeasibleUtteranceError, SOS_ID,
                   min_ctc_frames)
from .moe import MoELayer
from .nnet import (ConformerLayer, DecoderStack, MIN_FRAMES,
                   SubsamplingFrontend, attention_loss_batch, encode_span,
                   subsample_length)
from .numerics import (ConfigError, Linear, Module, Parameter, Tensor, add,
                       concat, log_softmax, mul, no_grad, reshape, softmax,
                       take, tensor_mean)
from .quantizer import (MaskSpec, RandomProjectionQuantizer, apply_mask,
                        mlm_loss_batch, quantize)

CHECKPOINT_MAGIC = b"LUPC"
CHECKPOINT_VERSION = 1

PRESET_NAMES = ("vanilla", "oracle_lid", "lid_sc", "moe", "mono", "lupet",
                "lupet_no_U", "lupet_no_P", "lupet_no_UP", "lupet_no_LU",
                "lupet_w2_1", "lupet_Uto50ep")

# Architecture-defining config fields; all enter the checkpoint hash.
_ARCH_FIELDS = ("d_feat", "d_model", "heads", "d_ff", "kernel_size",
                "n_enc_layers", "stage_layers", "n_dec_layers", "vocab_size",
                "n_lid", "n_ipa", "n_codes", "d_code", "quantizer_seed",
                "n_experts", "use_U", "use_P", "use_L", "use_MoE",
                "oracle_lid", "lid_emb_dim")


class CheckpointError(ValueError):
    """Unreadable checkpoint or mismatched architecture."""


@dataclass
class LupetConfig:
    """Every knob of the network, its losses and its schedule."""

    preset: str = "custom"
    d_feat: int = 16
    d_model: int = 64
    heads: int = 4
    d_ff: int = 256
    kernel_size: int = 15
    n_enc_layers: int = 8
    stage_layers: Tuple[int, int, int, int] = (2, 4, 6, 8)
    n_dec_layers: int = 2
    vocab_size: int = 34
    n_lid: int = 3
    n_ipa: int = 20
    lambda_ctc: float = 0.3
    w1: float = 0.3
    w2: float = 0.07
    w3: float = 0.3
    label_smoothing: float = 0.1
    mlm_start_epoch: int = 2
    mlm_end_epoch: int = 12
    mask_start_prob: float = 0.01
    mask_span: int = 20
    mask_noise_std: float = 0.1
    n_codes: int = 64
    d_code: int = 8
    quantizer_seed: int = 1234
    n_experts: int = 4
    use_U: bool = False
    use_P: bool = False
    use_L: bool = False
    use_MoE: bool = False
    oracle_lid: bool = False
    lid_emb_dim: int = 8
    mono_lid: int = -1
    sc_normalize: bool = True
    ctc_per_token: bool = False

    def __post_init__(self):
        self.stage_layers = tuple(int(s) for s in self.stage_layers)
        positive = ("d_feat", "d_model", "heads", "d_ff", "kernel_size",
                    "n_enc_layers", "n_dec_layers", "n_lid", "n_ipa",
                    "n_codes", "d_code", "n_experts", "lid_emb_dim",
                    "mask_span")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.vocab_size < 5:
            raise ConfigError(f"vocab_size must cover 4 specials plus at "
                              f"least one character, got {self.vocab_size}")
        if self.d_model % self.heads != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by "
                              f"{self.heads} heads")
        if self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel_size must be odd, got {self.kernel_size}")
        if len(self.stage_layers) != 4:
            raise ConfigError(f"stage_layers needs 4 entries, got "
                              f"{self.stage_layers}")
        if any(b <= a for a, b in zip(self.stage_layers, self.stage_layers[1:])) \
                or self.stage_layers[0] < 1:
            raise ConfigError(f"stage_layers must increase strictly from >= 1, "
                              f"got {self.stage_layers}")
        if self.stage_layers[-1] != self.n_enc_layers:
            raise ConfigError(f"last stage {self.stage_layers[-1]} must equal "
                              f"n_enc_layers {self.n_enc_layers}")
        if not 0.0 <= self.lambda_ctc <= 1.0:
            raise ConfigError(f"lambda_ctc must lie in [0, 1], got "
                              f"{self.lambda_ctc}")
        for name in ("w1", "w2", "w3"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError(f"label_smoothing must lie in [0, 1), got "
                              f"{self.label_smoothing}")
        if self.mlm_start_epoch > self.mlm_end_epoch:
            raise ConfigError(f"mlm_start_epoch {self.mlm_start_epoch} after "
                              f"mlm_end_epoch {self.mlm_end_epoch}")
        if not 0.0 <= self.mask_start_prob <= 1.0:
            raise ConfigError(f"mask_start_prob must lie in [0, 1], got "
                              f"{self.mask_start_prob}")
        if self.mask_noise_std < 0:
            raise ConfigError(f"mask_noise_std must be >= 0, got "
                              f"{self.mask_noise_std}")
        if self.use_MoE and self.n_experts < 2:
            raise ConfigError(f"mixture needs at least 2 experts, got "
                              f"{self.n_experts}")


@dataclass
class LossBreakdown:
    """Per-head losses (plain floats) plus the differentiable total."""

    l_attn: float
    l_ctc: float
    l_lid: float
    l_mlm: float
    l_ipa: float
    total: Tensor
    mlm_active: bool


def total_from_components(config: LupetConfig, l_attn: float, l_ctc: float,
                          l_lid: float = 0.0, l_mlm: float = 0.0,
                          l_ipa: float = 0.0) -> float:
    """The combined loss as plain arithmetic, for logging and verification."""
    lam = config.lambda_ctc
    return ((1.0 - lam) * l_attn + lam * l_ctc + config.w1 * l_lid
            + config.w2 * l_mlm + config.w3 * l_ipa)


def _condition_addend(z: Tensor, lin: Linear, normalize: bool = True) -> Tensor:
    return lin(softmax(z, axis=-1)) if normalize else lin(z)


def self_condition(h: Tensor, z: Tensor, lin: Linear,
                   normalize: bool = True) -> Tensor:
    """Feed intermediate predictions back into the encoder stream."""
    return add(h, _condition_addend(z, lin, normalize))


@dataclass
class EncodeResult:
    """Inference-time encoder outputs for decoding and diagnostics."""

    h: Tensor
    enc_lengths: np.ndarray
    token_log_probs: np.ndarray
    lid_log_probs: Optional[np.ndarray]
    ipa_log_probs: Optional[np.ndarray]
    router_src: Optional[np.ndarray]


class LupetModel(Module):
    """Staged conformer encoder with auxiliary heads and a token decoder."""

    def __init__(self, config: LupetConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        d, d_ff = config.d_model, config.d_ff
        d_in = config.d_feat + (config.lid_emb_dim if config.oracle_lid else 0)
        self.frontend = SubsamplingFrontend(d_in, d, rng)
        deep_start = config.stage_layers[2]
        self.enc_layers: List[ConformerLayer] = []
        for i in range(config.n_enc_layers):
            end_ffn = None
            if config.use_MoE and i >= deep_start:
                end_ffn = MoELayer(d, d_ff, config.n_experts, rng)
            self.enc_layers.append(ConformerLayer(
                d, config.heads, d_ff, config.kernel_size, rng, end_ffn=end_ffn))
        if config.use_L:
            self.lid_head = Linear(d, config.n_lid + 1, rng)
            self.lid_sc = Linear(config.n_lid + 1, d, rng)
        if config.use_P:
            self.ipa_head = Linear(d, config.n_ipa + 1, rng)
            self.ipa_sc = Linear(config.n_ipa + 1, d, rng)
        if config.use_U:
            lim = np.sqrt(6.0 / (d + config.n_codes))
            self.mlm_proj = Parameter(rng.uniform(-lim, lim,
                                                  (d, config.n_codes)))
            self.quantizer = RandomProjectionQuantizer(
                config.d_feat, config.n_codes, config.d_code,
                config.quantizer_seed)
        if config.oracle_lid:
            self.lid_embed = Parameter(rng.normal(
                0.0, 1.0 / np.sqrt(config.lid_emb_dim),
                (config.n_lid, config.lid_emb_dim)))
        self.ctc_head = Linear(d, config.vocab_size, rng)
        self.decoder = DecoderStack(config.vocab_size, d, config.heads, d_ff,
                                    config.n_dec_layers, rng)

    def _spans(self):
        s1, s2, s3, s4 = self.config.stage_layers
        return (self.enc_layers[:s1], self.enc_layers[s1:s2],
                self.enc_layers[s2:s3], self.enc_layers[s3:s4])

    def _input_features(self, features: np.ndarray,
                        lids: Optional[Sequence[int]]) -> Tensor:
        x = Tensor(np.asarray(features, dtype=np.float64))
        if not self.config.oracle_lid:
            return x
        if lids is None:
            raise ConfigError("oracle_lid model needs language ids as input")
        n_batch, n_frames, _ = x.shape
        rows = take(self.lid_embed, (np.asarray(lids, dtype=np.intp),))
        tiled = add(reshape(rows, (n_batch, 1, self.config.lid_emb_dim)),
                    np.zeros((n_batch, n_frames, self.config.lid_emb_dim)))
        return concat([x, tiled], axis=-1)

    def _require_feasible(self, targets: Sequence[Sequence[int]],
                          enc_lengths: np.ndarray, ids: Sequence[str],
                          head: str) -> None:
        bad = [f"{ids[b]} (needs {min_ctc_frames(t)} sub-sampled frames, "
               f"has {int(enc_lengths[b])})"
               for b, t in enumerate(targets)
               if min_ctc_frames(t) > enc_lengths[b]]
        if bad:
            raise InfeasibleUtteranceError(
                f"{head} CTC targets infeasible: " + "; ".join(bad))

    def forward_train(self, batch: Batch, epoch: int,
                      mask_rng: Optional[np.random.Generator] = None
                      ) -> LossBreakdown:
        """All active losses for one padded batch at the given epoch."""
        cfg = self.config
        n_batch = len(batch.ids)
        feats = np.asarray(batch.features, dtype=np.float64)
        if feats.ndim != 3 or feats.shape[2] != cfg.d_feat:
            raise ConfigError(f"expected features [B, T, {cfg.d_feat}], "
                              f"got {feats.shape}")
        lengths = np.asarray(batch.feat_lengths, dtype=np.intp)
        if np.any(lengths < MIN_FRAMES):
            short = [batch.ids[b] for b in np.nonzero(lengths < MIN_FRAMES)[0]]
            raise InfeasibleUtteranceError(
                f"utterances shorter than {MIN_FRAMES} frames: "
                + ", ".join(short))
        enc_lengths = np.array([subsample_length(int(n)) for n in lengths])
        token_ctc = [tuple(t - 1 for t in tt) for tt in batch.token_targets]
        self._require_feasible(token_ctc, enc_lengths, batch.ids, "token")
        lid_targets = None
        if cfg.use_L:
            lid_targets = [make_lid_targets(int(l), len(tt))
                           for l, tt in zip(batch.lids, batch.token_targets)]
            self._require_feasible(lid_targets, enc_lengths, batch.ids, "lid")
        if cfg.use_P:
            self._require_feasible(batch.ipa_targets, enc_lengths, batch.ids,
                                   "ipa")

        mlm_active = (cfg.use_U and
                      cfg.mlm_start_epoch <= epoch <= cfg.mlm_end_epoch)
        net_feats = feats
        positions: List[np.ndarray] = []
        unit_labels: List[np.ndarray] = []
        if mlm_active:
            rng = mask_rng if mask_rng is not None \
                else np.random.default_rng([cfg.quantizer_seed, epoch])
            spec = MaskSpec(cfg.mask_start_prob, cfg.mask_span,
                            cfg.mask_noise_std)
            net_feats = feats.copy()
            for b in range(n_batch):
                n = int(lengths[b])
                unit_labels.append(quantize(feats[b, :n], self.quantizer))
                masked, pos = apply_mask(feats[b, :n], spec, rng)
                net_feats[b, :n] = masked
                positions.append(pos)

        x = self._input_features(net_feats, batch.lids)
        h, _ = self.frontend(x, lengths)
        pad_mask = np.arange(h.shape[-2])[None, :] < enc_lengths[:, None]
        shallow, lower_mid, upper_mid, deep = self._spans()

        h = encode_span(h, shallow, pad_mask)
        l_lid_t, lid_emb = None, None
        if cfg.use_L:
            z_lid = self.lid_head(h)
            l_lid_t = tensor_mean(ctc_loss_batch(
                log_softmax(z_lid, axis=-1), lid_targets, enc_lengths))
            lid_emb = _condition_addend(z_lid, self.lid_sc, cfg.sc_normalize)
            h = add(h, lid_emb)

        h = encode_span(h, lower_mid, pad_mask)
        l_mlm_t, mlm_has_grad = None, False
        if mlm_active:
            l_mlm_t, mlm_has_grad = mlm_loss_batch(h, positions, unit_labels,
                                                   self.mlm_proj)

        h_um = encode_span(h, upper_mid, pad_mask)
        h = h_um
        l_ipa_t = None
        if cfg.use_P:
            z_ipa = self.ipa_head(h_um)
            l_ipa_t = tensor_mean(ctc_loss_batch(
                log_softmax(z_ipa, axis=-1), batch.ipa_targets, enc_lengths))
            h = self_condition(h_um, z_ipa, self.ipa_sc, cfg.sc_normalize)

        router_src = None
        if cfg.use_MoE:
            router_src = lid_emb if cfg.use_L else h_um
        h = encode_span(h, deep, pad_mask, lid_emb=router_src)

        z_tok = self.ctc_head(h)
        ctc_each = ctc_loss_batch(log_softmax(z_tok, axis=-1), token_ctc,
                                  enc_lengths)
        if cfg.ctc_per_token:
            ctc_each = mul(ctc_each, 1.0 / np.maximum(
                [len(t) for t in token_ctc], 1))
        l_ctc_t = tensor_mean(ctc_each)
        dec_in = _teacher_inputs(batch.token_targets)
        logits = self.decoder(dec_in, h, enc_lengths)
        l_attn_t = tensor_mean(attention_loss_batch(
            logits, batch.token_targets, EOS_ID, cfg.label_smoothing))

        total = add(mul(1.0 - cfg.lambda_ctc, l_attn_t),
                    mul(cfg.lambda_ctc, l_ctc_t))
        if l_lid_t is not None:
            total = add(total, mul(cfg.w1, l_lid_t))
        if mlm_has_grad:
            total = add(total, mul(cfg.w2, l_mlm_t))
        if l_ipa_t is not None:
            total = add(total, mul(cfg.w3, l_ipa_t))
        return LossBreakdown(
            l_attn=float(l_attn_t.data), l_ctc=float(l_ctc_t.data),
            l_lid=float(l_lid_t.data) if l_lid_t is not None else 0.0,
            l_mlm=float(l_mlm_t.data) if mlm_active else 0.0,
            l_ipa=float(l_ipa_t.data) if l_ipa_t is not None else 0.0,
            total=total, mlm_active=mlm_active)

    def encode(self, features: np.ndarray, lengths: Sequence[int],
               lids: Optional[Sequence[int]] = None) -> EncodeResult:
        """Gradient-free encoder pass with per-head log-probs for decoding."""
        cfg = self.config
        lengths = np.asarray(lengths, dtype=np.intp)
        with no_grad():
            x = self._input_features(np.asarray(features, dtype=np.float64),
                                     lids)
            h, enc_lengths = self.frontend(x, lengths)
            pad_mask = (np.arange(h.shape[-2])[None, :]
                        < np.asarray(enc_lengths)[:, None])
            shallow, lower_mid, upper_mid, deep = self._spans()
            h = encode_span(h, shallow, pad_mask)
            lid_logp, lid_emb = None, None
            if cfg.use_L:
                z_lid = self.lid_head(h)
                lid_logp = log_softmax(z_lid, axis=-1).data
                lid_emb = _condition_addend(z_lid, self.lid_sc,
                                            cfg.sc_normalize)
                h = add(h, lid_emb)
            h = encode_span(h, lower_mid, pad_mask)
            h_um = encode_span(h, upper_mid, pad_mask)
            h = h_um
            ipa_logp = None
            if cfg.use_P:
                z_ipa = self.ipa_head(h_um)
                ipa_logp = log_softmax(z_ipa, axis=-1).data
                h = self_condition(h_um, z_ipa, self.ipa_sc, cfg.sc_normalize)
            router_src = None
            if cfg.use_MoE:
                router_src = lid_emb if cfg.use_L else h_um
            h = encode_span(h, deep, pad_mask, lid_emb=router_src)
            token_logp = log_softmax(self.ctc_head(h), axis=-1).data
        return EncodeResult(
            h=h, enc_lengths=np.asarray(enc_lengths),
            token_log_probs=token_logp, lid_log_probs=lid_logp,
            ipa_log_probs=ipa_logp,
            router_src=None if router_src is None else router_src.data)


def _teacher_inputs(targets: Sequence[Sequence[int]]) -> np.ndarray:
    """Decoder prefixes [B, U_max+1]: sos then targets, padded with eos."""
    n_batch = len(targets)
    width = max((len(t) for t in targets), default=0) + 1
    ids = np.full((n_batch, width), EOS_ID, dtype=np.intp)
    ids[:, 0] = SOS_ID
    for b, t in enumerate(targets):
        ids[b, 1:1 + len(t)] = list(t)
    return ids


def build_preset(name: str, scale: str = "desk", **overrides) -> LupetConfig:
    """A named baseline or ablation configuration at desk or paper scale."""
    if name not in PRESET_NAMES:
        raise ConfigError(f"unknown preset {name!r}; choose from "
                          f"{', '.join(PRESET_NAMES)}")
    if scale == "desk":
        arch = dict(d_model=64, heads=4, d_ff=256, n_enc_layers=8,
                    stage_layers=(2, 4, 6, 8), n_dec_layers=2, n_codes=64,
                    d_code=8, n_experts=4, mlm_start_epoch=2,
                    mlm_end_epoch=12)
    elif scale == "paper":
        arch = dict(d_model=512, heads=8, d_ff=2048, n_enc_layers=12,
                    stage_layers=(3, 6, 9, 12), n_dec_layers=6, n_codes=8192,
                    d_code=16, n_experts=8, mlm_start_epoch=5,
                    mlm_end_epoch=30, d_feat=80)
    else:
        raise ConfigError(f"unknown scale {scale!r}; choose desk or paper")
    flags: Dict[str, object] = {}
    if name == "oracle_lid":
        flags = dict(oracle_lid=True)
    elif name == "lid_sc":
        flags = dict(use_L=True)
    elif name == "moe":
        flags = dict(use_MoE=True)
    elif name == "mono":
        half = arch["d_model"] // 2
        heads = arch["heads"]
        flags = dict(mono_lid=0, d_model=half - half % heads,
                     d_ff=arch["d_ff"] // 2)
    elif name == "lupet":
        flags = dict(use_U=True, use_P=True, use_L=True, use_MoE=True)
    elif name == "lupet_no_U":
        flags = dict(use_P=True, use_L=True, use_MoE=True)
    elif name == "lupet_no_P":
        flags = dict(use_U=True, use_L=True, use_MoE=True)
    elif name == "lupet_no_UP":
        flags = dict(use_L=True, use_MoE=True)
    elif name == "lupet_no_LU":
        flags = dict(use_P=True, use_MoE=True)
    elif name == "lupet_w2_1":
        flags = dict(use_U=True, use_P=True, use_L=True, use_MoE=True, w2=1.0)
    elif name == "lupet_Uto50ep":
        flags = dict(use_U=True, use_P=True, use_L=True, use_MoE=True,
                     mlm_end_epoch=50)
    arch.update(flags)
    arch.update(overrides)
    return LupetConfig(preset=name, **arch)


def arch_hash(model: LupetModel) -> str:
    """Digest of parameter names/shapes and architecture-defining config."""
    sig = {
        "params": sorted(
            [name, list(p.shape), str(p.data.dtype), bool(p.frozen)]
            for name, p in model.named_parameters()),
        "arch": {k: getattr(model.config, k) for k in _ARCH_FIELDS},
    }
    blob = json.dumps(sig, sort_keys=True, default=list).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


@dataclass
class Checkpoint:
    """A loaded checkpoint: config, named arrays and bookkeeping."""

    config: LupetConfig
    params: Dict[str, np.ndarray]
    frozen: Dict[str, bool]
    arch: str
    meta: dict


def save_checkpoint(path, model: LupetModel, meta: Optional[dict] = None) -> None:
    """Versioned binary: JSON header then little-endian float64 blobs."""
    named = sorted(model.named_parameters())
    index = []
    offset = 0
    blobs = []
    for name, p in named:
        raw = np.ascontiguousarray(p.data, dtype="<f8").tobytes()
        index.append([name, list(p.shape), bool(p.frozen), offset, len(raw)])
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"arch_hash": arch_hash(model), "config": asdict(model.config),
         "meta": meta or {}, "params": index},
        sort_keys=True, default=list).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad checkpoint magic {blob[:4]!r}")
    version, header_len = struct.unpack("<IQ", blob[4:16])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    try:
        header = json.loads(blob[16:16 + header_len])
    except ValueError as err:
        raise CheckpointError(f"{path}: corrupt header: {err}") from err
    body = blob[16 + header_len:]
    params: Dict[str, np.ndarray] = {}
    frozen: Dict[str, bool] = {}
    for name, shape, is_frozen, offset, nbytes in header["params"]:
        raw = body[offset:offset + nbytes]
        if len(raw) != nbytes:
            raise CheckpointError(f"{path}: truncated blob for {name}")
        arr = np.frombuffer(raw, dtype="<f8").reshape(shape)
        params[name] = arr.astype(np.float64)
        frozen[name] = bool(is_frozen)
    config_dict = dict(header["config"])
    config_dict["stage_layers"] = tuple(config_dict["stage_layers"])
    return Checkpoint(config=LupetConfig(**config_dict), params=params,
                      frozen=frozen, arch=header["arch_hash"],
                      meta=header.get("meta", {}))


def build_model(ckpt: Checkpoint, seed: int = 0) -> LupetModel:
    """Instantiate a model and load checkpoint weights into it."""
    model = LupetModel(ckpt.config, seed=seed)
    if arch_hash(model) != ckpt.arch:
        raise CheckpointError("checkpoint architecture hash does not match "
                              "the rebuilt model")
    named = dict(model.named_parameters())
    if set(named) != set(ckpt.params):
        raise CheckpointError("checkpoint parameter names do not match")
    for name, p in named.items():
        if p.shape != ckpt.params[name].shape:
            raise CheckpointError(f"shape mismatch for {name}")
        p.data[...] = ckpt.params[name]
    return model


def average_checkpoints(paths: Sequence) -> Checkpoint:
    """Mean of trainable weights; frozen ones copied from the first."""
    if not paths:
        raise CheckpointError("no checkpoints to average")
    ckpts = [load_checkpoint(p) for p in paths]
    first = ckpts[0]
    for p, c in zip(paths, ckpts):
        if c.arch != first.arch:
            raise CheckpointError(f"{p}: architecture hash differs from "
                                  f"{paths[0]}")
    params = {}
    for name in first.params:
        if first.frozen[name]:
            params[name] = first.params[name].copy()
        else:
            params[name] = np.mean([c.params[name] for c in ckpts], axis=0)
    return Checkpoint(config=first.config, params=params,
                      frozen=dict(first.frozen), arch=first.arch,
                      meta={"averaged_from": [str(p) for p in paths]})


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_format_value(v) for v in value) + "]"
    raise ConfigError(f"cannot serialize config value {value!r}")


def _parse_value(text: str):
    text = text.strip()
    if text.startswith('"'):
        return json.loads(text)
    if text.startswith("["):
        if not text.endswith("]"):
            raise ConfigError(f"unterminated list {text!r}")
        inner = text[1:-1].strip()
        return [_parse_value(v) for v in inner.split(",")] if inner else []
    if text in ("true", "false"):
        return text == "true"
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        raise ConfigError(f"cannot parse config value {text!r}")


def save_config(path, config: LupetConfig) -> None:
    """Key-value config file, one `name = value` line per field."""
    with open(path, "w", encoding="utf-8") as fh:
        for f in fields(config):
            fh.write(f"{f.name} = {_format_value(getattr(config, f.name))}\n")


def load_config(path) -> LupetConfig:
    known = {f.name: f for f in fields(LupetConfig)}
    defaults = LupetConfig()
    found = {}
    with open(path, "r", encoding="utf-8") as fh:
        for ln, line in enumerate(fh, 1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{ln}: expected `key = value`")
            key, _, raw = stripped.partition("=")
            key = key.strip()
            if key not in known:
                raise ConfigError(f"{path}:{ln}: unknown config key {key!r}")
            if not raw.lstrip().startswith('"') and "#" in raw:
                raw = raw.split("#", 1)[0]
            value = _parse_value(raw)
            template = getattr(defaults, key)
            if isinstance(template, bool):
                if not isinstance(value, bool):
                    raise ConfigError(f"{path}:{ln}: {key} expects a bool")
            elif isinstance(template, int) and not isinstance(value, int):
                raise ConfigError(f"{path}:{ln}: {key} expects an integer")
            elif isinstance(template, float) and isinstance(value, int):
                value = float(value)
            if isinstance(template, tuple):
                value = tuple(value)
            found[key] = value
    return LupetConfig(**found)

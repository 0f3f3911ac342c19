"""Command-line front end: corpus generation, training, decoding, scoring,
and model diagnostics."""

from __future__ import annotations

import argparse
import json
import math
import os
import struct
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .ctc import ctc_greedy_decode
from .data import (BLANK_ID, EOS_ID, SOS_ID, UNK_ID, ManifestRecord,
                   Utterance, Vocab, build_vocab, check_feasible, detokenize,
                   generate_corpus, ipa_inventory_from_records,
                   load_utterance, make_batches, make_language_specs,
                   read_features, read_manifest)
from .eval import score_system, write_report_csv, write_report_json
from .model import (PRESET_NAMES, LupetConfig, LupetModel, arch_hash,
                    average_checkpoints, build_model, build_preset,
                    load_checkpoint, load_config, save_checkpoint)
from .moe import MoELayer, route
from .nnet import beam_search_decode
from .numerics import Parameter, Tensor, no_grad
from .quantizer import MaskSpec, apply_mask, quantize

TRAIN_STATE_MAGIC = b"LUPT"
TRAIN_STATE_VERSION = 1
METRICS_VERSION_LINE = "# lupet-metrics-v1"
METRICS_COLUMNS = ("epoch", "step", "l_attn", "l_ctc", "l_lid", "l_mlm",
                   "l_ipa", "total", "dev_wer")
DECODE_FORBID = (BLANK_ID, SOS_ID, UNK_ID)
DECODE_MODES = ("ctc_greedy", "attention_beam")


class CliError(ValueError):
    """Invalid flags, files or settings (exit code 2)."""


class TrainDiverged(RuntimeError):
    """Non-finite training loss (exit code 1)."""


# -- optimizer -----------------------------------------------------------------


@dataclass
class AdamSettings:
    lr: float = 1e-3
    warmup: int = 500
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9


class Adam:
    """Adam with an inverse-square-root warmup schedule."""

    def __init__(self, params: Sequence[Parameter], settings: AdamSettings):
        if settings.lr <= 0:
            raise CliError(f"learning rate must be positive, got {settings.lr}")
        if settings.warmup < 1:
            raise CliError(f"warmup must be >= 1 step, got {settings.warmup}")
        self.params = list(params)
        self.settings = settings
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def rate(self, t: int) -> float:
        s = self.settings
        return s.lr * min(t / s.warmup, math.sqrt(s.warmup / t))

    def step(self) -> float:
        """Update every parameter holding a gradient; returns the LR used."""
        self.t += 1
        s = self.settings
        lr = self.rate(self.t)
        c1 = 1.0 - s.beta1 ** self.t
        c2 = 1.0 - s.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:  # heads outside their schedule window
                continue
            g = p.grad
            m *= s.beta1
            m += (1.0 - s.beta1) * g
            v *= s.beta2
            v += (1.0 - s.beta2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + s.eps)
        return lr


# -- train state ---------------------------------------------------------------


@dataclass
class TrainState:
    """Bookkeeping needed to restart training bit-identically."""

    config: LupetConfig
    seed: int
    epochs_done: int
    global_step: int
    best: List[Tuple[float, int, str]]  # (dev loss, epoch, checkpoint name)
    vocab: Tuple[str, ...]
    inventory: Tuple[str, ...]
    arch: str


def _write_blob(path, meta: dict, arrays: Dict[str, np.ndarray]) -> None:
    index = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        raw = np.ascontiguousarray(arrays[name], dtype="<f8").tobytes()
        index.append([name, list(arrays[name].shape), offset, len(raw)])
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "arrays": index},
                        sort_keys=True, default=list).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(TRAIN_STATE_MAGIC)
        fh.write(struct.pack("<IQ", TRAIN_STATE_VERSION, len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def _read_blob(path) -> Tuple[dict, Dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != TRAIN_STATE_MAGIC:
        raise CliError(f"{path}: bad train-state magic {blob[:4]!r}")
    version, header_len = struct.unpack("<IQ", blob[4:16])
    if version != TRAIN_STATE_VERSION:
        raise CliError(f"{path}: unsupported train-state version {version}")
    header = json.loads(blob[16:16 + header_len])
    body = blob[16 + header_len:]
    arrays = {}
    for name, shape, offset, nbytes in header["arrays"]:
        raw = body[offset:offset + nbytes]
        if len(raw) != nbytes:
            raise CliError(f"{path}: truncated array {name}")
        arrays[name] = (np.frombuffer(raw, dtype="<f8")
                        .reshape(shape).astype(np.float64))
    return header["meta"], arrays


def save_train_state(path, state: TrainState, model: LupetModel,
                     opt: Adam) -> None:
    arrays: Dict[str, np.ndarray] = {}
    trainable = []
    for name, p in sorted(model.named_parameters()):
        arrays["param." + name] = p.data
        if not p.frozen:
            trainable.append(name)
    if len(trainable) != len(opt.params):
        raise CliError("optimizer does not cover the trainable parameters")
    for name, m, v in zip(trainable, opt.m, opt.v):
        arrays["adam_m." + name] = m
        arrays["adam_v." + name] = v
    meta = {"config": _config_dict(state.config), "seed": state.seed,
            "epochs_done": state.epochs_done,
            "global_step": state.global_step,
            "best": [[loss, epoch, name] for loss, epoch, name in state.best],
            "vocab": list(state.vocab), "inventory": list(state.inventory),
            "arch": state.arch}
    _write_blob(path, meta, arrays)


def load_train_state(path) -> Tuple[TrainState, Dict[str, np.ndarray]]:
    meta, arrays = _read_blob(path)
    config_dict = dict(meta["config"])
    config_dict["stage_layers"] = tuple(config_dict["stage_layers"])
    state = TrainState(
        config=LupetConfig(**config_dict), seed=int(meta["seed"]),
        epochs_done=int(meta["epochs_done"]),
        global_step=int(meta["global_step"]),
        best=[(float(l), int(e), str(n)) for l, e, n in meta["best"]],
        vocab=tuple(meta["vocab"]), inventory=tuple(meta["inventory"]),
        arch=str(meta["arch"]))
    return state, arrays


def _config_dict(config: LupetConfig) -> dict:
    return asdict(config)


# -- data plumbing -------------------------------------------------------------


@dataclass
class DataBundle:
    """Manifest-derived vocabulary, phoneme inventory and dimensions."""

    records: List[ManifestRecord]
    vocab: Vocab
    inventory: Tuple[str, ...]
    n_lid: int
    d_feat: int


def load_data(data_dir) -> DataBundle:
    data_dir = Path(data_dir)
    manifest = data_dir / "manifest.jsonl"
    if not manifest.exists():
        raise CliError(f"no manifest at {manifest}")
    records = read_manifest(manifest)
    if not records:
        raise CliError(f"{manifest}: empty manifest")
    vocab = build_vocab(r.text for r in records)
    inventory = ipa_inventory_from_records(records)
    n_lid = max(r.lid for r in records) + 1
    d_feat = int(read_features(data_dir / records[0].feature_path).shape[1])
    return DataBundle(records, vocab, inventory, n_lid, d_feat)


def split_utterances(bundle: DataBundle, data_dir, split: str,
                     mono_lid: int = -1) -> List[Utterance]:
    recs = [r for r in bundle.records
            if r.split == split and (mono_lid < 0 or r.lid == mono_lid)]
    return [load_utterance(r, data_dir, bundle.vocab, bundle.inventory)
            for r in sorted(recs, key=lambda r: r.id)]


def check_config_matches_data(config: LupetConfig, bundle: DataBundle) -> None:
    pairs = (("vocab_size", bundle.vocab.size), ("n_lid", bundle.n_lid),
             ("n_ipa", len(bundle.inventory)), ("d_feat", bundle.d_feat))
    bad = [f"{key}={getattr(config, key)} (data needs {value})"
           for key, value in pairs if getattr(config, key) != value]
    if bad:
        raise CliError("config does not match the data: " + ", ".join(bad))


def _pad_features(features: Sequence[np.ndarray]
                  ) -> Tuple[np.ndarray, np.ndarray]:
    lengths = np.array([f.shape[0] for f in features], dtype=np.intp)
    out = np.zeros((len(features), int(lengths.max()), features[0].shape[1]))
    for b, f in enumerate(features):
        out[b, :lengths[b]] = f
    return out, lengths


# -- evaluation helpers --------------------------------------------------------


def ctc_greedy_transcripts(model: LupetModel, vocab: Vocab,
                           utterances: Sequence[Utterance],
                           batch_size: int = 16) -> Dict[str, str]:
    """Best-path CTC transcripts keyed by utterance id."""
    hyps: Dict[str, str] = {}
    ordered = sorted(utterances, key=lambda u: u.id)
    oracle = model.config.oracle_lid
    for start in range(0, len(ordered), batch_size):
        chunk = ordered[start:start + batch_size]
        feats, lengths = _pad_features([u.features for u in chunk])
        lids = [u.lid for u in chunk] if oracle else None
        er = model.encode(feats, lengths, lids=lids)
        for i, u in enumerate(chunk):
            labels = ctc_greedy_decode(er.token_log_probs[i],
                                       int(er.enc_lengths[i]))
            hyps[u.id] = detokenize([l + 1 for l in labels], vocab)
    return hyps


def evaluate_dev(model: LupetModel, vocab: Vocab,
                 utterances: Sequence[Utterance],
                 batch_size: int) -> Tuple[float, float]:
    """Clean-input dev loss (no masking) and CTC-greedy dev WER."""
    total, count = 0.0, 0
    with no_grad():
        for batch in make_batches(utterances, batch_size, seed=0):
            br = model.forward_train(batch, epoch=-1)  # -1: masking never on
            total += float(br.total.data) * len(batch.ids)
            count += len(batch.ids)
    hyps = ctc_greedy_transcripts(model, vocab, utterances, batch_size)
    report = score_system(sorted(utterances, key=lambda u: u.id), hyps,
                          unit="char")
    return total / count, report.aggregates["avg"]


# -- training ------------------------------------------------------------------


@dataclass
class TrainSettings:
    data_dir: Path
    out_dir: Path
    config: LupetConfig
    epochs: int = 20
    seed: int = 0
    batch_size: int = 16
    lr: float = 1e-3
    warmup: int = 500
    keep_best: int = 5
    resume: bool = False
    train_split: str = "train"
    dev_split: str = "dev"
    log: bool = True


def _model_meta(bundle: DataBundle, **extra) -> dict:
    meta = {"vocab": list(bundle.vocab.tokens),
            "ipa": list(bundle.inventory)}
    meta.update(extra)
    return meta


def _append_metrics(path, epoch: int, step: int, means: np.ndarray,
                    dev_wer: float) -> None:
    row = ([str(epoch), str(step)]
           + [repr(float(x)) for x in means]
           + [repr(float(dev_wer))])
    with open(path, "a") as fh:
        fh.write(",".join(row) + "\n")


def _dump_divergence(out_dir, epoch: int, step: int, batch, br) -> Path:
    path = Path(out_dir) / "nan_dump.json"
    payload = {"epoch": epoch, "step": step, "batch_ids": list(batch.ids),
               "l_attn": br.l_attn, "l_ctc": br.l_ctc, "l_lid": br.l_lid,
               "l_mlm": br.l_mlm, "l_ipa": br.l_ipa,
               "total": float(br.total.data)}
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
    return path


def run_training(settings: TrainSettings) -> Path:
    """Train, log per-epoch metrics, keep best-k checkpoints, average them."""
    if settings.epochs < 1:
        raise CliError(f"epochs must be >= 1, got {settings.epochs}")
    if settings.batch_size < 1:
        raise CliError(f"batch size must be >= 1, got {settings.batch_size}")
    if settings.keep_best < 1:
        raise CliError(f"keep-best must be >= 1, got {settings.keep_best}")
    out = Path(settings.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data_dir = Path(settings.data_dir)
    bundle = load_data(data_dir)
    config = settings.config
    check_config_matches_data(config, bundle)
    train_utts = split_utterances(bundle, data_dir, settings.train_split,
                                  config.mono_lid)
    dev_utts = split_utterances(bundle, data_dir, settings.dev_split,
                                config.mono_lid)
    if not train_utts:
        raise CliError(f"no {settings.train_split!r} utterances to train on")
    if not dev_utts:
        raise CliError(f"no {settings.dev_split!r} utterances to validate on")
    check_feasible(train_utts)
    check_feasible(dev_utts)

    state_path = out / "train_state.lupt"
    metrics_path = out / "metrics.csv"
    adam_settings = AdamSettings(lr=settings.lr, warmup=settings.warmup)
    if settings.resume:
        if not state_path.exists():
            raise CliError(f"no train state to resume at {state_path}")
        if not metrics_path.exists():
            raise CliError(f"no metrics log to append to at {metrics_path}")
        state, arrays = load_train_state(state_path)
        if state.config != config:
            raise CliError("resume config differs from the saved train state")
        if state.seed != settings.seed:
            raise CliError(f"resume seed {settings.seed} differs from the "
                           f"saved {state.seed}")
        if state.vocab != bundle.vocab.tokens:
            raise CliError("resume data vocabulary differs from the "
                           "saved train state")
        if settings.epochs <= state.epochs_done:
            raise CliError(f"already trained {state.epochs_done} epochs; "
                           f"asked for {settings.epochs}")
        model = LupetModel(config, seed=settings.seed)
        if arch_hash(model) != state.arch:
            raise CliError("train state architecture does not match the "
                           "rebuilt model")
        trainable = []
        for name, p in sorted(model.named_parameters()):
            key = "param." + name
            if key not in arrays or arrays[key].shape != p.shape:
                raise CliError(f"train state is missing parameter {name}")
            p.data[...] = arrays[key]
            if not p.frozen:
                trainable.append((name, p))
        opt = Adam([p for _, p in trainable], adam_settings)
        opt.t = state.global_step
        for i, (name, _) in enumerate(trainable):
            opt.m[i][...] = arrays["adam_m." + name]
            opt.v[i][...] = arrays["adam_v." + name]
        best = list(state.best)
        start_epoch = state.epochs_done + 1
        global_step = state.global_step
    else:
        model = LupetModel(config, seed=settings.seed)
        trainable = [(n, p) for n, p in sorted(model.named_parameters())
                     if not p.frozen]
        opt = Adam([p for _, p in trainable], adam_settings)
        best = []
        start_epoch, global_step = 1, 0
        with open(metrics_path, "w") as fh:
            fh.write(METRICS_VERSION_LINE + "\n")
            fh.write(",".join(METRICS_COLUMNS) + "\n")

    for epoch in range(start_epoch, settings.epochs + 1):
        sums = np.zeros(6)  # attn, ctc, lid, mlm, ipa, total
        batches = make_batches(train_utts, settings.batch_size,
                               seed=[settings.seed, epoch])
        for bi, batch in enumerate(batches):
            mask_rng = np.random.default_rng([settings.seed, epoch, bi])
            br = model.forward_train(batch, epoch, mask_rng)
            total = float(br.total.data)
            if not math.isfinite(total):
                dump = _dump_divergence(out, epoch, global_step + 1, batch, br)
                raise TrainDiverged(
                    f"non-finite loss at epoch {epoch} on batch "
                    f"{', '.join(batch.ids)}; details in {dump}")
            model.zero_grad()
            br.total.backward()
            opt.step()
            global_step += 1
            sums += (br.l_attn, br.l_ctc, br.l_lid, br.l_mlm, br.l_ipa, total)
        means = sums / len(batches)
        dev_loss, dev_wer = evaluate_dev(model, bundle.vocab, dev_utts,
                                         settings.batch_size)
        _append_metrics(metrics_path, epoch, global_step, means, dev_wer)

        name = f"ckpt-epoch{epoch:03d}.lupc"
        save_checkpoint(out / name, model,
                        meta=_model_meta(bundle, epoch=epoch,
                                         dev_loss=dev_loss, dev_wer=dev_wer))
        best.append((dev_loss, epoch, name))
        best.sort(key=lambda item: (item[0], item[1]))
        while len(best) > settings.keep_best:
            _, _, evicted = best.pop()
            (out / evicted).unlink(missing_ok=True)
        state = TrainState(config=config, seed=settings.seed,
                           epochs_done=epoch, global_step=global_step,
                           best=best, vocab=bundle.vocab.tokens,
                           inventory=tuple(bundle.inventory),
                           arch=arch_hash(model))
        save_train_state(state_path, state, model, opt)
        if settings.log:
            print(f"epoch {epoch}: total {means[5]:.4f} "
                  f"dev_loss {dev_loss:.4f} dev_wer {dev_wer:.4f}")

    avg = average_checkpoints([out / name for _, _, name in best])
    final = build_model(avg, seed=0)
    final_path = out / "final.lupc"
    save_checkpoint(final_path, final,
                    meta=_model_meta(bundle,
                                     averaged_from=[n for _, _, n in best]))
    if settings.log:
        print(f"averaged {len(best)} checkpoints into {final_path}")
    return final_path


# -- decoding ------------------------------------------------------------------


@dataclass
class DecodeSettings:
    mode: str = "ctc_greedy"
    beam: int = 4
    max_len: int = 40
    batch_size: int = 16
    threads: int = 1


def decode_records(model: LupetModel, vocab: Vocab,
                   records: Sequence[ManifestRecord], data_dir,
                   settings: DecodeSettings
                   ) -> List[Tuple[ManifestRecord, str]]:
    """One (record, hypothesis text) pair per record, ordered by id."""
    if settings.mode not in DECODE_MODES:
        raise CliError(f"unknown decode mode {settings.mode!r}")
    if settings.beam < 1:
        raise CliError(f"beam size must be >= 1, got {settings.beam}")
    if settings.max_len < 1:
        raise CliError(f"max decode length must be >= 1, got "
                       f"{settings.max_len}")
    ordered = sorted(records, key=lambda r: r.id)
    oracle = model.config.oracle_lid
    results: List[Tuple[ManifestRecord, str]] = []
    with no_grad():  # held across worker threads so the flag restores cleanly
        for start in range(0, len(ordered), settings.batch_size):
            chunk = ordered[start:start + settings.batch_size]
            feats = [read_features(Path(data_dir) / r.feature_path)
                     for r in chunk]
            padded, lengths = _pad_features(feats)
            lids = [r.lid for r in chunk] if oracle else None
            er = model.encode(padded, lengths, lids=lids)
            if settings.mode == "ctc_greedy":
                for i, r in enumerate(chunk):
                    labels = ctc_greedy_decode(er.token_log_probs[i],
                                               int(er.enc_lengths[i]))
                    results.append((r, detokenize([l + 1 for l in labels],
                                                  vocab)))
                continue
            enc = er.h.data

            def decode_one(i: int) -> str:
                length = int(er.enc_lengths[i])
                hyp = beam_search_decode(model.decoder,
                                         Tensor(enc[i, :length]), length,
                                         SOS_ID, EOS_ID, settings.beam,
                                         settings.max_len,
                                         forbid=DECODE_FORBID)
                return detokenize(hyp.token_ids, vocab)

            if settings.threads > 1:
                with ThreadPoolExecutor(settings.threads) as pool:
                    texts = list(pool.map(decode_one, range(len(chunk))))
            else:
                texts = [decode_one(i) for i in range(len(chunk))]
            results.extend(zip(chunk, texts))
    return results


def _vocab_from_meta(ckpt, path) -> Vocab:
    tokens = ckpt.meta.get("vocab")
    if not tokens:
        raise CliError(f"{path}: checkpoint carries no vocabulary metadata")
    vocab = Vocab(tuple(str(t) for t in tokens))
    if vocab.size != ckpt.config.vocab_size:
        raise CliError(f"{path}: vocabulary metadata has {vocab.size} tokens "
                       f"but the model expects {ckpt.config.vocab_size}")
    return vocab


def _thread_cap() -> int:
    raw = os.environ.get("LUPET_THREADS", "1")
    try:
        threads = int(raw)
    except ValueError:
        raise CliError(f"LUPET_THREADS must be an integer, got {raw!r}")
    if threads < 1:
        raise CliError(f"LUPET_THREADS must be >= 1, got {threads}")
    return threads


def read_hypotheses(path) -> Dict[str, str]:
    hyps: Dict[str, str] = {}
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except ValueError as err:
                raise CliError(f"{path}:{ln}: bad hypothesis line: {err}")
            if not isinstance(obj, dict) or "id" not in obj or "text" not in obj:
                raise CliError(f"{path}:{ln}: hypotheses need id and text")
            if obj["id"] in hyps:
                raise CliError(f"{path}:{ln}: duplicate hypothesis for "
                               f"{obj['id']!r}")
            hyps[str(obj["id"])] = str(obj["text"])
    return hyps


# -- diagnostics ---------------------------------------------------------------


def _iter_encoded(model: LupetModel, records: Sequence[ManifestRecord],
                  data_dir, batch_size: int):
    oracle = model.config.oracle_lid
    for start in range(0, len(records), batch_size):
        chunk = records[start:start + batch_size]
        feats = [read_features(Path(data_dir) / r.feature_path)
                 for r in chunk]
        padded, lengths = _pad_features(feats)
        lids = [r.lid for r in chunk] if oracle else None
        yield chunk, model.encode(padded, lengths, lids=lids)


def codebook_utilization(model: LupetModel,
                         records: Sequence[ManifestRecord], data_dir,
                         seed: int = 0) -> np.ndarray:
    """Histogram of quantizer codes at mask-covered sub-sampled frames."""
    cfg = model.config
    if not cfg.use_U:
        raise CliError("model has no quantizer to inspect")
    spec = MaskSpec(cfg.mask_start_prob, cfg.mask_span, cfg.mask_noise_std)
    rng = np.random.default_rng([seed])
    counts = np.zeros(cfg.n_codes, dtype=np.int64)
    for r in sorted(records, key=lambda r: r.id):
        feats = read_features(Path(data_dir) / r.feature_path)
        labels = quantize(feats, model.quantizer)
        _, positions = apply_mask(feats, spec, rng)
        if positions.size:
            counts += np.bincount(labels[positions], minlength=cfg.n_codes)
    return counts


def router_frequencies(model: LupetModel,
                       records: Sequence[ManifestRecord], data_dir,
                       batch_size: int = 16
                       ) -> Tuple[np.ndarray, np.ndarray]:
    """Per-language expert weight-mass frequencies and frame totals."""
    cfg = model.config
    if not cfg.use_MoE:
        raise CliError("model has no expert layers to inspect")
    moe_layers = [l.end_ffn for l in model.enc_layers
                  if isinstance(l.end_ffn, MoELayer)]
    mass = np.zeros((cfg.n_lid, cfg.n_experts))
    frames = np.zeros(cfg.n_lid)
    ordered = sorted(records, key=lambda r: r.id)
    for chunk, er in _iter_encoded(model, ordered, data_dir, batch_size):
        src = Tensor(er.router_src)
        with no_grad():
            routed = [route(src, layer.router) for layer in moe_layers]
        for b, r in enumerate(chunk):
            n = int(er.enc_lengths[b])
            frames[r.lid] += n * len(moe_layers)
            for idx, weights in routed:
                np.add.at(mass[r.lid], idx[b, :n].ravel(),
                          weights.data[b, :n].ravel())
    return mass, frames


def lid_confusion(model: LupetModel, records: Sequence[ManifestRecord],
                  data_dir, batch_size: int = 16) -> np.ndarray:
    """Frame counts [true lid, predicted lid], blank column excluded."""
    cfg = model.config
    if not cfg.use_L:
        raise CliError("model has no language-id head to inspect")
    counts = np.zeros((cfg.n_lid, cfg.n_lid), dtype=np.int64)
    ordered = sorted(records, key=lambda r: r.id)
    for chunk, er in _iter_encoded(model, ordered, data_dir, batch_size):
        pred = np.argmax(er.lid_log_probs[..., 1:], axis=-1)
        for b, r in enumerate(chunk):
            n = int(er.enc_lengths[b])
            counts[r.lid] += np.bincount(pred[b, :n], minlength=cfg.n_lid)
    return counts


# -- commands ------------------------------------------------------------------


def _parse_counts(text: str) -> Dict[str, int]:
    counts: Dict[str, int] = {}
    for part in text.split(","):
        split, sep, num = part.partition("=")
        split = split.strip()
        if not sep or not split:
            raise CliError(f"counts need split=count pairs, got {part!r}")
        try:
            counts[split] = int(num)
        except ValueError:
            raise CliError(f"bad utterance count {num!r} for split {split!r}")
        if counts[split] < 0:
            raise CliError(f"negative count for split {split!r}")
    return counts


def _parse_floats(text: str) -> Tuple[float, ...]:
    try:
        return tuple(float(x) for x in text.split(","))
    except ValueError:
        raise CliError(f"expected comma-separated numbers, got {text!r}")


def _parse_groups(text: str) -> Tuple[Tuple[int, ...], Tuple[int, ...]]:
    high: Tuple[int, ...] = ()
    low: Tuple[int, ...] = ()
    if not text:
        return high, low
    for part in text.split(";"):
        name, _, ids = part.partition("=")
        name = name.strip()
        if name not in ("high", "low") or not ids:
            raise CliError(f"groups look like 'high=0;low=1,2', got {part!r}")
        try:
            values = tuple(int(x) for x in ids.split(","))
        except ValueError:
            raise CliError(f"bad language ids in group {part!r}")
        if name == "high":
            high = values
        else:
            low = values
    return high, low


def cmd_generate(args) -> int:
    weights = _parse_floats(args.weights)
    specs = make_language_specs(args.languages, args.inventory_size,
                                args.overlap, weights)
    counts = _parse_counts(args.counts)
    records = generate_corpus(args.out, specs, counts, args.seed,
                              d_feat=args.d_feat)
    print(f"wrote {len(records)} utterances to {args.out}")
    return 0


def cmd_train(args) -> int:
    if bool(args.config) == bool(args.preset):
        raise CliError("pass exactly one of --config or --preset")
    bundle = load_data(args.data)
    dims = dict(vocab_size=bundle.vocab.size, n_lid=bundle.n_lid,
                n_ipa=len(bundle.inventory), d_feat=bundle.d_feat)
    if args.preset:
        if args.mono_lid is not None:
            dims["mono_lid"] = args.mono_lid
        config = build_preset(args.preset, scale=args.scale, **dims)
    else:
        config = load_config(args.config)
        if args.mono_lid is not None:
            config = replace(config, mono_lid=args.mono_lid)
    settings = TrainSettings(
        data_dir=Path(args.data), out_dir=Path(args.out), config=config,
        epochs=args.epochs, seed=args.seed, batch_size=args.batch_size,
        lr=args.lr, warmup=args.warmup, keep_best=args.keep_best,
        resume=args.resume, log=not args.quiet)
    run_training(settings)
    return 0


def cmd_decode(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = build_model(ckpt, seed=0)
    vocab = _vocab_from_meta(ckpt, args.checkpoint)
    manifest = Path(args.data) / "manifest.jsonl"
    records = [r for r in read_manifest(manifest) if r.split == args.split]
    if model.config.mono_lid >= 0:
        records = [r for r in records if r.lid == model.config.mono_lid]
    if not records:
        raise CliError(f"no utterances in split {args.split!r}")
    settings = DecodeSettings(mode=args.mode, beam=args.beam,
                              max_len=args.max_len,
                              batch_size=args.batch_size,
                              threads=_thread_cap())
    results = decode_records(model, vocab, records, args.data, settings)
    with open(args.out, "w") as fh:
        for r, text in results:
            fh.write(json.dumps({"id": r.id, "lid": r.lid, "split": r.split,
                                 "text": text}, sort_keys=True) + "\n")
    print(f"wrote {len(results)} hypotheses to {args.out}")
    return 0


def cmd_score(args) -> int:
    ref_path = Path(args.ref)
    if ref_path.is_dir():
        ref_path = ref_path / "manifest.jsonl"
    refs = [r for r in read_manifest(ref_path) if r.split == args.split]
    if args.lid is not None:
        refs = [r for r in refs if r.lid == args.lid]
    if not refs:
        raise CliError(f"no reference utterances in split {args.split!r}")
    hyps = read_hypotheses(args.hyp)
    high, low = _parse_groups(args.groups)
    report = score_system(refs, hyps, unit=args.unit, high_group=high,
                          low_group=low, exclude_lid=args.exclude_lid,
                          on_missing=args.on_missing)
    base = args.out if args.out else str(args.hyp) + ".report"
    write_report_csv(base + ".csv", report)
    write_report_json(base + ".json", report)
    for lid in sorted(report.per_language):
        stats = report.per_language[lid]
        print(f"lid {lid}: rate {stats.error_rate:.4f} "
              f"(S={stats.substitutions} D={stats.deletions} "
              f"I={stats.insertions} N={stats.ref_tokens})")
    for name in sorted(report.aggregates):
        print(f"{name}: {report.aggregates[name]:.4f}")
    return 0


def cmd_inspect(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = build_model(ckpt, seed=0)
    data_dir = Path(args.data)
    manifest = data_dir / "manifest.jsonl"
    records = [r for r in read_manifest(manifest) if r.split == args.split]
    if model.config.mono_lid >= 0:
        records = [r for r in records if r.lid == model.config.mono_lid]
    if not records:
        raise CliError(f"no utterances in split {args.split!r}")
    lines: List[str] = []
    if args.what == "codebook":
        counts = codebook_utilization(model, records, data_dir,
                                      seed=args.seed)
        lines.append("code,count")
        lines += [f"{c},{int(n)}" for c, n in enumerate(counts)]
        summary = (f"{int(counts.sum())} masked frames over "
                   f"{int(np.count_nonzero(counts))} codes")
    elif args.what == "router":
        mass, frames = router_frequencies(model, records, data_dir,
                                          args.batch_size)
        n_experts = model.config.n_experts
        lines.append("lid," + ",".join(f"expert_{e}"
                                       for e in range(n_experts)))
        for lid in range(model.config.n_lid):
            if frames[lid] == 0:
                continue
            freq = mass[lid] / frames[lid]
            lines.append(f"{lid}," + ",".join(repr(float(f)) for f in freq))
        summary = f"{int(frames.sum())} routed frames"
    else:
        counts = lid_confusion(model, records, data_dir, args.batch_size)
        n_lid = model.config.n_lid
        lines.append("lid," + ",".join(f"pred_{l}" for l in range(n_lid)))
        for lid in range(n_lid):
            lines.append(f"{lid}," + ",".join(str(int(c))
                                              for c in counts[lid]))
        accuracy = float(np.trace(counts)) / max(float(counts.sum()), 1.0)
        summary = f"frame accuracy {accuracy:.4f}"
    Path(args.out).write_text("\n".join(lines) + "\n")
    print(f"wrote {args.what} diagnostics to {args.out} ({summary})")
    return 0


# -- argument parsing ----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lupet",
        description="Hierarchical multilingual speech recognition at desk "
                    "scale: corpus generation, training, decoding, scoring "
                    "and diagnostics.")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="write a synthetic corpus")
    gen.add_argument("--out", required=True, help="corpus directory")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--languages", type=int, default=3)
    gen.add_argument("--inventory-size", type=int, default=10)
    gen.add_argument("--overlap", type=float, default=0.5)
    gen.add_argument("--weights", default="10,3,1",
                     help="comma-separated hours weights, one per language")
    gen.add_argument("--counts", default="train=1400,dev=200,test=200",
                     help="per-split utterance totals, split=count pairs")
    gen.add_argument("--d-feat", type=int, default=16)
    gen.set_defaults(func=cmd_generate)

    train = sub.add_parser("train", help="train a model on a corpus")
    train.add_argument("--data", required=True, help="corpus directory")
    train.add_argument("--out", required=True, help="run directory")
    train.add_argument("--preset", choices=PRESET_NAMES)
    train.add_argument("--config", help="config file instead of a preset")
    train.add_argument("--scale", choices=("desk", "paper"), default="desk")
    train.add_argument("--epochs", type=int, default=20)
    train.add_argument("--seed", type=int, default=0)
    train.add_argument("--batch-size", type=int, default=16)
    train.add_argument("--lr", type=float, default=1e-3)
    train.add_argument("--warmup", type=int, default=500)
    train.add_argument("--keep-best", type=int, default=5)
    train.add_argument("--mono-lid", type=int, default=None,
                       help="train on one language only")
    train.add_argument("--resume", action="store_true",
                       help="continue from the saved train state")
    train.add_argument("--quiet", action="store_true")
    train.set_defaults(func=cmd_train)

    dec = sub.add_parser("decode", help="write hypotheses for a split")
    dec.add_argument("--checkpoint", required=True)
    dec.add_argument("--data", required=True)
    dec.add_argument("--out", required=True, help="hypothesis JSONL path")
    dec.add_argument("--mode", choices=DECODE_MODES, default="ctc_greedy")
    dec.add_argument("--beam", type=int, default=4)
    dec.add_argument("--max-len", type=int, default=40)
    dec.add_argument("--split", default="dev")
    dec.add_argument("--batch-size", type=int, default=16)
    dec.set_defaults(func=cmd_decode)

    score = sub.add_parser("score", help="error rates of a hypothesis file")
    score.add_argument("--hyp", required=True, help="hypothesis JSONL path")
    score.add_argument("--ref", required=True,
                       help="reference manifest or corpus directory")
    score.add_argument("--split", default="dev")
    score.add_argument("--unit", choices=("char", "word"), default="char")
    score.add_argument("--groups", default="",
                       help="resource groups, e.g. 'high=0;low=1,2'")
    score.add_argument("--exclude-lid", type=int, default=None)
    score.add_argument("--lid", type=int, default=None,
                       help="score one language only")
    score.add_argument("--on-missing", choices=("warn", "error"),
                       default="warn")
    score.add_argument("--out", default=None,
                       help="report path prefix (default: beside --hyp)")
    score.set_defaults(func=cmd_score)

    ins = sub.add_parser("inspect", help="diagnostics from a checkpoint")
    ins.add_argument("--checkpoint", required=True)
    ins.add_argument("--data", required=True)
    ins.add_argument("--what", choices=("codebook", "router", "lid"),
                     required=True)
    ins.add_argument("--out", required=True, help="diagnostics CSV path")
    ins.add_argument("--split", default="dev")
    ins.add_argument("--seed", type=int, default=0)
    ins.add_argument("--batch-size", type=int, default=16)
    ins.set_defaults(func=cmd_inspect)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except TrainDiverged as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

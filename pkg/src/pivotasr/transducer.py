"""Bifocal streaming transducer: encoders, predictor, joint, loss, decoding.

Two unidirectional LSTM encoder stacks (a small one for lead-in audio and a
large one for the rest) share a text predictor and a joint network.  The
joint projects each encoder path independently to the joint dimension,
combines additively with the projected predictor state, and maps through
tanh to vocabulary logits.  The training loss marginalizes over all
monotonic blank/label alignments with a log-space forward lattice.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nn
from .errors import ConfigError, DataError, ShapeError

BLANK_ID = 0
SMALL = "small"
LARGE = "large"


@dataclass
class TransducerConfig:
    feat_dim: int = 16
    small_enc_units: int = 24
    large_enc_units: int = 64
    enc_layers: int = 3
    time_reduction_layer_index: int = 2
    time_reduction_factor: int = 2
    pred_embed_dim: int = 16
    pred_units: int = 32
    pred_layers: int = 1
    joint_dim: int = 32
    vocab_size: int = 29

    def validate(self):
        if not (1 <= self.time_reduction_layer_index <= self.enc_layers):
            raise ConfigError(
                "time_reduction_layer_index must lie in [1, enc_layers], got "
                f"{self.time_reduction_layer_index} with {self.enc_layers} layers"
            )
        if self.time_reduction_factor < 1:
            raise ConfigError("time_reduction_factor must be >= 1")
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must be >= 2 (blank plus at least one label)")
        for field in (
            "feat_dim",
            "small_enc_units",
            "large_enc_units",
            "enc_layers",
            "pred_embed_dim",
            "pred_units",
            "pred_layers",
            "joint_dim",
        ):
            if getattr(self, field) < 1:
                raise ConfigError(f"{field} must be positive")
        return self

    def encoder_units(self, path):
        if path == SMALL:
            return self.small_enc_units
        if path == LARGE:
            return self.large_enc_units
        raise ConfigError(f"unknown encoder path {path!r}")

    def encoder_output_dim(self, path):
        u = self.encoder_units(path)
        if self.time_reduction_layer_index == self.enc_layers:
            return u * self.time_reduction_factor
        return u

    def reduced_len(self, t):
        return -(-t // self.time_reduction_factor) if t else 0


@dataclass
class JointParams:
    we_small: nn.ParamTensor
    we_large: nn.ParamTensor
    wp: nn.ParamTensor
    b: nn.ParamTensor
    wout: nn.ParamTensor
    bout: nn.ParamTensor

    def we(self, path):
        if path == SMALL:
            return self.we_small
        if path == LARGE:
            return self.we_large
        raise ConfigError(f"unknown encoder path {path!r}")


@dataclass
class TransducerParams:
    cfg: TransducerConfig
    enc_small: list
    enc_large: list
    pred_emb: nn.ParamTensor
    pred: list
    joint: JointParams

    def enc_layers(self, path):
        if path == SMALL:
            return self.enc_small
        if path == LARGE:
            return self.enc_large
        raise ConfigError(f"unknown encoder path {path!r}")


def build_transducer_params(cfg, seed, registry):
    """Create all transducer tensors, registering them by name."""
    cfg.validate()

    def stack(prefix, units):
        layers = []
        in_dim = cfg.feat_dim
        for i in range(cfg.enc_layers):
            layers.append(nn.make_lstm(f"{prefix}.l{i}", in_dim, units, seed, registry))
            in_dim = units
            if i + 1 == cfg.time_reduction_layer_index:
                in_dim = units * cfg.time_reduction_factor
        return layers

    enc_small = stack("enc_small", cfg.small_enc_units)
    enc_large = stack("enc_large", cfg.large_enc_units)
    pred_emb = nn.init_param(
        "pred.emb", (cfg.vocab_size, cfg.pred_embed_dim), seed, registry=registry
    )
    pred = []
    in_dim = cfg.pred_embed_dim
    for i in range(cfg.pred_layers):
        pred.append(nn.make_lstm(f"pred.l{i}", in_dim, cfg.pred_units, seed, registry))
        in_dim = cfg.pred_units
    joint = JointParams(
        we_small=nn.init_param(
            "joint.we_small",
            (cfg.joint_dim, cfg.encoder_output_dim(SMALL)),
            seed,
            registry=registry,
        ),
        we_large=nn.init_param(
            "joint.we_large",
            (cfg.joint_dim, cfg.encoder_output_dim(LARGE)),
            seed,
            registry=registry,
        ),
        wp=nn.init_param(
            "joint.wp", (cfg.joint_dim, cfg.pred_units), seed, registry=registry
        ),
        b=nn.init_param("joint.b", (cfg.joint_dim,), seed, zero=True, registry=registry),
        wout=nn.init_param(
            "joint.wout", (cfg.vocab_size, cfg.joint_dim), seed, registry=registry
        ),
        bout=nn.init_param(
            "joint.bout", (cfg.vocab_size,), seed, zero=True, registry=registry
        ),
    )
    return TransducerParams(cfg, enc_small, enc_large, pred_emb, pred, joint)


def time_reduce(seq, factor, tape=None):
    """Concatenate each group of ``factor`` adjacent frames into one row.

    The final partial group is zero-padded.  Row-major reshape of the padded
    (T, d) matrix realizes the concatenation exactly.
    """
    if factor < 1:
        raise ConfigError("time reduction factor must be >= 1")
    seq = nn.as_tensor(seq)
    if factor == 1:
        return seq
    t_count, d = seq.data.shape
    pad = (-t_count) % factor
    if pad:
        seq = nn.concat_rows([seq, nn.Tensor(np.zeros((pad, d)))], tape)
    return nn.reshape(seq, ((t_count + pad) // factor, d * factor), tape)


def encode(frames, path, params, tape=None):
    """Run one encoder path over (T, feat_dim) frames; returns (T', d_path).

    Strictly causal: reduced output k depends only on original frames
    <= k*factor + factor - 1.
    """
    cfg = params.cfg
    seq = nn.as_tensor(frames)
    if seq.data.ndim != 2 or seq.data.shape[0] < 1:
        raise ShapeError(f"encode needs a nonempty (T, {cfg.feat_dim}) input, got {seq.data.shape}")
    if seq.data.shape[1] != cfg.feat_dim:
        raise ShapeError(
            f"encode: feature dim {seq.data.shape[1]} does not match config {cfg.feat_dim}"
        )
    for i, layer in enumerate(params.enc_layers(path)):
        seq = nn.lstm_run(seq, layer, tape)
        if i + 1 == cfg.time_reduction_layer_index:
            seq = time_reduce(seq, cfg.time_reduction_factor, tape)
    return seq


def predict(labels, params, tape=None):
    """Predictor outputs for a label prefix; row u conditions on labels[:u].

    Row 0 is the start state (empty history).
    """
    labels = list(labels)
    if any(int(y) == BLANK_ID for y in labels):
        raise DataError("predictor input must not contain the blank symbol")
    cfg = params.cfg
    if any(not (0 < int(y) < cfg.vocab_size) for y in labels):
        raise DataError(f"label out of vocabulary range [1, {cfg.vocab_size - 1}]")
    start = nn.Tensor(np.zeros((1, cfg.pred_units)))
    if not labels:
        return start
    seq = nn.gather_rows(params.pred_emb, np.asarray(labels, dtype=np.intp), tape)
    for layer in params.pred:
        seq = nn.lstm_run(seq, layer, tape)
    return nn.concat_rows([start, seq], tape)


def joint(h_enc, h_pred, path, params, tape=None):
    """Fuse one encoder frame with one predictor state into vocab logits."""
    jp = params.joint
    z = nn.add(
        nn.add(
            nn.dense_forward(h_enc, jp.we(path), None, tape),
            nn.dense_forward(h_pred, jp.wp, None, tape),
            tape,
        ),
        jp.b,
        tape,
    )
    return nn.dense_forward(nn.tanh(z, tape), jp.wout, jp.bout, tape)


def log_prob_lattice(enc_segments, labels, params, tape=None):
    """Joint-network log-probabilities over the full (T', U+1, V) lattice.

    ``enc_segments`` is an ordered list of (encodings, path) pairs whose rows
    concatenate to the stream's reduced frames.
    """
    cfg = params.cfg
    jp = params.joint
    pred_out = predict(labels, params, tape)
    projected = [
        nn.dense_forward(seg, jp.we(path), None, tape) for seg, path in enc_segments
    ]
    ep = projected[0] if len(projected) == 1 else nn.concat_rows(projected, tape)
    pp = nn.dense_forward(pred_out, jp.wp, None, tape)
    t_count = ep.data.shape[0]
    u_count = pp.data.shape[0]
    grid = nn.add(
        nn.reshape(ep, (t_count, 1, cfg.joint_dim), tape),
        nn.reshape(pp, (1, u_count, cfg.joint_dim), tape),
        tape,
    )
    z = nn.tanh(nn.add(grid, jp.b, tape), tape)
    flat = nn.reshape(z, (t_count * u_count, cfg.joint_dim), tape)
    logits = nn.dense_forward(flat, jp.wout, jp.bout, tape)
    logits = nn.reshape(logits, (t_count, u_count, cfg.vocab_size), tape)
    return nn.log_softmax(logits, tape, axis=-1)


def _lae(a, b):
    if a == -math.inf:
        return b
    if b == -math.inf:
        return a
    if a > b:
        return a + math.log1p(math.exp(b - a))
    return b + math.log1p(math.exp(a - b))


def rnnt_nll(logprobs, labels, tape=None, blank=BLANK_ID):
    """Negative log-likelihood of ``labels`` under a (T', U+1, V) lattice.

    Forward DP over log_alpha, where each interior cell log-sums exactly its
    blank predecessor (t-1, u) and label predecessor (t, u-1).  The backward
    pass computes the standard edge-occupancy gradients via a beta recursion.
    """
    lp = nn.as_tensor(logprobs)
    labels = [int(y) for y in labels]
    if lp.data.ndim != 3:
        raise ShapeError(f"lattice log-probs must be (T', U+1, V), got {lp.data.shape}")
    t_n, u_n, v_n = lp.data.shape
    u_count = len(labels)
    if u_n != u_count + 1:
        raise ShapeError(
            f"lattice U axis {u_n} does not match {u_count} target labels + 1"
        )
    if t_n < 1:
        raise ShapeError("lattice needs at least one frame")
    if any(y == blank or not (0 <= y < v_n) for y in labels):
        raise DataError("target labels must be non-blank vocabulary ids")
    lpd = lp.data
    label_idx = np.asarray(labels, dtype=np.intp)
    # lab[t, u] = log P(labels[u] | t, u); blk[t, u] = log P(blank | t, u)
    blk = lpd[:, :, blank]
    lab = (
        lpd[:, :-1, :][np.arange(t_n)[:, None], np.arange(u_count)[None, :], label_idx]
        if u_count
        else np.zeros((t_n, 0))
    )
    # Row-wise DP: the in-row label scan a[u] = lae(fb[u], a[u-1] + lab[u-1])
    # closes to a running log-sum-exp after factoring out cumulative label
    # scores L[u] = sum(lab[:u]).
    alpha = np.empty((t_n, u_count + 1))
    fb = np.full(u_count + 1, -math.inf)
    fb[0] = 0.0
    for t in range(t_n):
        if t > 0:
            fb = alpha[t - 1] + blk[t - 1]
        cum = np.concatenate(([0.0], np.cumsum(lab[t])))
        alpha[t] = np.logaddexp.accumulate(fb - cum) + cum
    ll = alpha[t_n - 1, u_count] + blk[t_n - 1, u_count]
    out = nn.Tensor(np.float64(-ll))
    if tape is not None:

        def bwd(g):
            beta = np.empty((t_n + 1, u_count + 1))
            beta[t_n] = -math.inf
            beta[t_n, u_count] = 0.0
            for t in range(t_n - 1, -1, -1):
                vb = blk[t] + beta[t + 1]
                cum = np.concatenate(([0.0], np.cumsum(lab[t])))
                c = vb + cum
                beta[t] = np.logaddexp.accumulate(c[::-1])[::-1] - cum
            glp = np.zeros_like(lpd)
            glp[:, :, blank] = np.exp(alpha + blk + beta[1:] - ll)
            if u_count:
                occ = np.exp(alpha[:, :-1] + lab + beta[:-1, 1:] - ll)
                np.add.at(
                    glp,
                    (np.arange(t_n)[:, None], np.arange(u_count)[None, :], label_idx),
                    occ,
                )
            return (-float(g) * glp,)

        tape.record(out, (lp,), bwd)
    return out


def rnnt_loss(encodings, labels, params, path=LARGE, tape=None):
    """Transducer NLL of ``labels`` given one path's encodings (T', d)."""
    lp = log_prob_lattice([(nn.as_tensor(encodings), path)], labels, params, tape)
    return rnnt_nll(lp, labels, tape)


class GreedyDecoder:
    """Streaming frame-synchronous argmax decoder.

    Per frame, emits the argmax label and advances the predictor until blank
    wins or ``max_symbols_per_frame`` is hit.  Feeding frames incrementally
    yields exactly the labels of a one-shot decode over the same frames.
    """

    def __init__(self, model, max_symbols_per_frame=4):
        if max_symbols_per_frame < 1:
            raise ConfigError("max_symbols_per_frame must be >= 1")
        self._model = model
        self._max_symbols = max_symbols_per_frame
        self._pred_out, self._pred_state = model.pred_init()
        self.labels = []

    def step(self, h_enc, path):
        """Consume one encoder output frame; returns labels emitted for it."""
        emitted = []
        for _ in range(self._max_symbols):
            logits = self._model.joint_logits(h_enc, self._pred_out, path)
            k = int(np.argmax(logits))
            if k == BLANK_ID:
                break
            emitted.append(k)
            self._pred_out, self._pred_state = self._model.pred_advance(
                self._pred_state, k
            )
        self.labels.extend(emitted)
        return emitted


def greedy_decode(enc_frames, model, max_symbols_per_frame=4):
    """Decode an iterable of (h_enc row, path) pairs; returns the label list."""
    dec = GreedyDecoder(model, max_symbols_per_frame)
    for h_enc, path in enc_frames:
        dec.step(h_enc, path)
    return dec.labels

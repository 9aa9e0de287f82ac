"""Full model assembly: transducer plus biasing, with a named param registry."""

from __future__ import annotations

import numpy as np

from . import biasing, nn, transducer
from .errors import CheckpointError
from .transducer import BLANK_ID


class Model:
    """Owns every ParamTensor of the bifocal transducer and its biasing layers.

    Parameter init is keyed on (seed, tensor name), so the transducer tensors
    are identical across biasing configurations with the same seed.
    """

    def __init__(self, tcfg, bcfg, seed, mode="dual-attn"):
        self.tcfg = tcfg.validate()
        self.bcfg = bcfg.validate(dual_attn=(mode == "dual-attn")) if bcfg else None
        self.seed = seed
        self.mode = mode
        self.params = {}
        self.transducer = transducer.build_transducer_params(tcfg, seed, self.params)
        self.biasing = None
        if bcfg is not None:
            self.biasing = biasing.build_biasing_params(
                bcfg,
                token_vocab=tcfg.vocab_size,
                small_query_dim=tcfg.encoder_output_dim(transducer.SMALL),
                large_query_dim=tcfg.encoder_output_dim(transducer.LARGE),
                seed=seed,
                registry=self.params,
            )

    # -- forward pieces ------------------------------------------------

    def encode(self, frames, path, tape=None):
        return transducer.encode(frames, path, self.transducer, tape)

    def predict(self, labels, tape=None):
        return transducer.predict(labels, self.transducer, tape)

    def joint_logits(self, h_enc, pred_out, path):
        """Inference-path vocab logits for one (frame, predictor state)."""
        return transducer.joint(
            nn.as_tensor(h_enc), nn.as_tensor(pred_out), path, self.transducer
        ).data

    def pred_init(self):
        return np.zeros(self.tcfg.pred_units), [None] * self.tcfg.pred_layers

    def pred_advance(self, state, label):
        if not (0 < int(label) < self.tcfg.vocab_size) or int(label) == BLANK_ID:
            raise ValueError(f"cannot advance predictor on label {label}")
        x = nn.Tensor(self.transducer.pred_emb.data[int(label)])
        new_state = []
        for li, layer in enumerate(self.transducer.pred):
            h, c = nn.lstm_step(x, state[li], layer)
            new_state.append((h, c))
            x = h
        return x.data, new_state

    # -- parameter plumbing ---------------------------------------------

    def param_names(self):
        return sorted(self.params)

    def state_dict(self):
        return {name: self.params[name].data for name in self.param_names()}

    def load_state_dict(self, arrays):
        extra = sorted(set(arrays) - set(self.params))
        if extra:
            raise CheckpointError(f"checkpoint has unknown tensors: {', '.join(extra)}")
        missing = sorted(set(self.params) - set(arrays))
        if missing:
            raise CheckpointError(f"checkpoint is missing tensors: {', '.join(missing)}")
        for name in self.param_names():
            arr = np.asarray(arrays[name], dtype=np.float64)
            want = self.params[name].data.shape
            if arr.shape != want:
                raise CheckpointError(
                    f"tensor {name}: checkpoint shape {arr.shape} does not match "
                    f"configured shape {want}"
                )
        for name, p in self.params.items():
            p.data = np.asarray(arrays[name], dtype=np.float64).copy()

    def clone_arrays(self):
        return {name: p.data.copy() for name, p in self.params.items()}

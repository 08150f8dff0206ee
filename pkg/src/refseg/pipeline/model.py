"""Full model assembly: encoders -> cross-modal alignment -> mask decoder,
plus target selection and single-clip inference."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import alignment as al
from .. import decoder as dec
from .. import encoders as enc
from ..losses import GroundTruth, LossBreakdown, MatchResult, total_loss
from ..params import named_tensors
from ..tensor import Tensor
from .config import Config


@dataclass
class ModelParams:
    encoder: enc.VideoEncoderParams
    fuse: enc.FuseParams
    alignment: al.AlignmentParams
    decoder: dec.MaskDecoderParams
    w_div: Tensor


@dataclass
class Prediction:
    mask_probs: Tensor  # (T, K, H, W)
    ref_scores: Tensor  # (T, K)
    kernels: tuple  # three (T, K, C0) tensors
    aligned: Tensor  # (T, H3W3 + S, C)


def select_target(ref_scores: np.ndarray) -> int:
    """Candidate with the highest referring-score sum over frames.

    Ties resolve to the smallest index.
    """
    return int(np.argmax(ref_scores.sum(axis=0)))


class Model:
    def __init__(self, config: Config, params: ModelParams):
        self.config = config
        self.params = params
        d = config.dims
        self._pos = al.sine_pos_2d(d.h // 16, d.w // 16, d.c)

    @classmethod
    def init(cls, config: Config, rng: np.random.Generator) -> "Model":
        d = config.dims
        params = ModelParams(
            encoder=enc.init_video_encoder(rng, d.c1),
            fuse=enc.init_fuse(rng, d.c3, d.c_text, d.c),
            alignment=al.init_alignment(rng, c=d.c, k=d.k, c0=d.c0, heads=d.heads),
            decoder=dec.init_mask_decoder(rng, c=d.c, c1=d.c1, c2=d.c2, k=d.k,
                                          c0=d.c0, alpha=d.alpha, alpha2=d.alpha2),
            w_div=Tensor(np.eye(d.c0), requires_grad=True),
        )
        return cls(config, params)

    # -- parameter views ---------------------------------------------------

    def named_parameters(self) -> list:
        return named_tensors(self.params)

    def encoder_parameters(self) -> list:
        return named_tensors(self.params.encoder, prefix="encoder")

    def zero_grads(self) -> None:
        for _, t in self.named_parameters():
            t.grad = None

    # -- forward -----------------------------------------------------------

    def forward(self, frames: np.ndarray, tokens: list, train: bool = False,
                rng: np.random.Generator | None = None) -> Prediction:
        """Run a clip (T, H, W, 3) uint8 plus query tokens through the model.

        Dropout is active only when ``train`` is set and an RNG is provided.
        """
        cfg = self.config
        d = cfg.dims
        clip = Tensor(frames.astype(np.float64) / 255.0)
        pyr = enc.encode_video(clip, self.params.encoder)
        text = enc.encode_text(tokens, width=d.c_text, max_tokens=d.s_max)
        joint = enc.fuse_project(pyr, text, self.params.fuse)

        drop = al.Dropout(cfg.optim.dropout if train else 0.0, rng)
        n_visual = (d.h // 16) * (d.w // 16)
        aligned = al.encode_alignment(joint, self._pos, self.params.alignment,
                                      n_visual=n_visual, drop=drop)
        hidden = al.decode_queries(self.params.alignment, aligned, drop=drop)
        kernels = al.kernel_heads(hidden, self.params.alignment)
        ref_scores = al.referring_head(hidden, self.params.alignment)

        visual = dec.strip_text(aligned, n_visual)
        mask_probs = dec.run_decoder(pyr, visual, kernels, self.params.decoder)
        return Prediction(mask_probs=mask_probs, ref_scores=ref_scores,
                          kernels=kernels, aligned=aligned)

    def loss(self, pred: Prediction, gt: GroundTruth) -> tuple[LossBreakdown, MatchResult]:
        return total_loss(pred.mask_probs, pred.ref_scores, pred.kernels,
                          self.params.w_div, gt, self.config.loss)

    def infer(self, frames: np.ndarray, tokens: list) -> tuple[np.ndarray, float, Prediction]:
        """Deterministic inference: binary masks (T, H, W) of the selected
        candidate plus its mean referring score as confidence."""
        pred = self.forward(frames, tokens, train=False)
        scores = pred.ref_scores.data
        k_star = select_target(scores)
        probs = pred.mask_probs.data[:, k_star]
        masks = dec.binarize(probs)
        confidence = float(scores[:, k_star].mean())
        return masks, confidence, pred

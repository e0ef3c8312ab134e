"""End-to-end graph: encoders -> 2D branch (MCAM) -> STFM -> decoder."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as tc
from .decoder import DecoderParams, decode_affordance
from .data import replicate_image_to_clip
from .encoders import (EncoderConfig, ImageEncoderParams, PointEncoderParams, PointGroups,
                       VideoEncoderParams, encode_image, encode_points, encode_video, group_points)
from .geometry import project_points
from .mcam import McamParams, PropagationParams, mcam_forward, upsample
from .params import named_tensors
from .stfm import StfmParams, stfm_cross_attend, stfm_fuse
from .tensor import Tensor


class AblationError(ValueError):
    pass


@dataclass(frozen=True)
class Ablation:
    use_mcam: bool = True
    use_stfm: bool = True
    use_proj: bool = True
    img_mode: bool = False

    VALID = {
        (False, True, False): "STFM only (no 2D branch)",
        (True, False, True): "MCAM + Proj (no STFM)",
        (False, True, True): "STFM + Proj (no MCAM)",
        (True, True, True): "full",
    }

    def __post_init__(self):
        if not isinstance(self.img_mode, bool):
            raise AblationError(f"img_mode must be a bool, got {self.img_mode!r}")
        key = (self.use_mcam, self.use_stfm, self.use_proj)
        if key not in self.VALID:
            rows = "; ".join(f"mcam={m} stfm={s} proj={p} ({name})" for (m, s, p), name in self.VALID.items())
            raise AblationError(f"unsupported ablation mcam={key[0]} stfm={key[1]} proj={key[2]}; valid rows: {rows}")

    @property
    def row(self) -> str:
        return self.VALID[(self.use_mcam, self.use_stfm, self.use_proj)]


@dataclass
class ModelInputs:
    """Everything one forward pass consumes for a single sample."""

    coords: np.ndarray                 # N x 3
    projection: np.ndarray             # 1 x H x W
    clip: np.ndarray                   # T x 1 x H x W
    groups: PointGroups | None = None
    video_features: Tensor | None = None   # cached frozen-encoder output


@dataclass
class VAGNet:
    cfg: EncoderConfig
    ablation: Ablation
    point_enc: PointEncoderParams
    video_enc: VideoEncoderParams
    prop: PropagationParams
    decoder: DecoderParams
    image_enc: ImageEncoderParams | None = None
    mcam: McamParams | None = None
    stfm: StfmParams | None = None
    img_frame: int = 0                 # frame replicated in img mode (pre-contact by default)
    training: bool = True
    bn_running_in_eval: bool = False
    trace: dict = field(default_factory=dict, repr=False)

    @classmethod
    def init(cls, cfg: EncoderConfig = EncoderConfig(), ablation: Ablation = Ablation(),
             seed: int = 0) -> "VAGNet":
        rng = np.random.default_rng(seed)
        # fixed draw order keeps shared parts identical across ablations
        point_enc = PointEncoderParams.init(cfg, rng)
        image_enc = ImageEncoderParams.init(cfg, rng)
        video_enc = VideoEncoderParams.init(cfg, rng)
        mcam = McamParams.init(cfg, rng)
        prop = PropagationParams.init(cfg, rng)
        stfm = StfmParams.init(cfg, rng)
        decoder = DecoderParams.init(cfg, rng)
        return cls(cfg, ablation, point_enc, video_enc, prop, decoder,
                   image_enc=image_enc if ablation.use_proj else None,
                   mcam=mcam if ablation.use_proj else None,
                   stfm=stfm if ablation.use_stfm else None)

    # -- parameters ------------------------------------------------------
    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name in ("point_enc", "image_enc", "video_enc", "mcam", "prop", "stfm", "decoder"):
            out.update(named_tensors(getattr(self, name), name + "."))
        return out

    def trainable(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.named_parameters().items() if v.requires_grad}

    def buffers(self) -> dict[str, np.ndarray]:
        if self.mcam is None or self.mcam.bn_running is None:
            return {}
        return {"mcam.bn_running.mean": self.mcam.bn_running.mean,
                "mcam.bn_running.var": self.mcam.bn_running.var}

    def set_buffer(self, name: str, value: np.ndarray) -> None:
        attr = name.rsplit(".", 1)[1]
        setattr(self.mcam.bn_running, attr, np.array(value, dtype=float))

    def eval(self) -> "VAGNet":
        self.training = False
        return self

    def train(self) -> "VAGNet":
        self.training = True
        return self

    # -- forward ---------------------------------------------------------
    def video_features(self, clip) -> Tensor:
        return encode_video(clip, self.video_enc, self.cfg)

    def model_clip(self, clip: np.ndarray) -> np.ndarray:
        """The clip the graph actually consumes (img mode replicates one frame)."""
        if not self.ablation.img_mode:
            return clip
        if not 0 <= self.img_frame < clip.shape[0]:
            raise AblationError(f"img_frame {self.img_frame} outside clip of {clip.shape[0]} frames")
        return replicate_image_to_clip(clip[self.img_frame], self.cfg.T)

    def prepare(self, sample, cache_video: bool | None = None) -> ModelInputs:
        """Per-sample inputs; frozen video features are computed once, off the tape."""
        coords = sample.points.coords
        projection = project_points(coords, sample.viewpoint).pixels
        clip = self.model_clip(sample.clip)
        groups = group_points(coords, self.cfg)
        if cache_video is None:
            cache_video = not any(t.requires_grad for t in named_tensors(self.video_enc).values())
        feats = None
        if cache_video:
            with tc.no_grad():
                feats = self.video_features(clip)
        return ModelInputs(coords, projection, clip, groups=groups, video_features=feats)

    def predict(self, sample, inputs: ModelInputs | None = None) -> np.ndarray:
        """Per-point scores (N,) without recording a tape."""
        with tc.no_grad():
            return self.forward(inputs or self.prepare(sample)).data.reshape(-1)

    def forward(self, inputs: ModelInputs, keep_trace: bool = False) -> Tensor:
        """Returns A_pred (N x 1). With ``keep_trace`` every named feature lands in ``self.trace``."""
        cfg, abl = self.cfg, self.ablation
        trace: dict = {} if keep_trace else None
        F_p, state = encode_points(inputs.coords, self.point_enc, cfg, groups=inputs.groups)
        F_v = inputs.video_features if inputs.video_features is not None else self.video_features(inputs.clip)
        if abl.use_proj:
            F_i = encode_image(inputs.projection, self.image_enc, cfg)
            F_3d = mcam_forward(F_p, state, F_i, F_v, self.mcam, self.prop, contextual=abl.use_mcam,
                                training=self.training, use_running_stats=self.bn_running_in_eval,
                                trace=trace)
        else:
            F_i = None
            F_3d = upsample(F_p, state, self.prop)
        if abl.use_stfm:
            F_pv, att = stfm_cross_attend(F_3d, F_v, self.stfm, return_attention=True)
            F_f = stfm_fuse(F_3d, F_pv, self.stfm)
        else:
            F_pv, att = None, None
            F_f = F_3d
        A = decode_affordance(F_f, self.decoder)
        if keep_trace:
            trace.update(F_p=F_p, F_i=F_i, F_v=F_v, F_3d=F_3d, F_pv=F_pv, F_f=F_f, A_pred=A,
                         stfm_attention=att, state=state)
            self.trace = trace
        return A

    __call__ = forward

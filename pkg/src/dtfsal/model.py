"""End-to-end saliency model.

clip -> pyramid encoder -> top-down fusion -> per-stage token blocks ->
(optional) audio-visual fusion per level -> decoder -> map in (0, 1) at the
clip's spatial resolution. The audio branch turns a waveform into log-mel
segments and per-segment token vectors that condition the fusion blocks.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .audio import AudioClip, AudioFrontend, AudioFrontendConfig, LogMelStack
from .config import ModelConfig
from .decoder import make_decoder
from .encoder import PyramidEncoder, VideoClip
from .enhancement import EnhancementStack, TopDownFusion, parse_block_placement
from .fusion import make_fusion
from .nn import Module
from .tensor import GradTape, Tensor


class SaliencyModel(Module):
    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        self.config = config
        dtype = config.np_dtype
        rng = np.random.default_rng(np.random.PCG64(seed))
        c = config.base_channels
        cw = config.refined_channels

        self.encoder = PyramidEncoder(c, config.blocks_per_stage, rng=rng, dtype=dtype)
        self.topdown = TopDownFusion(
            [c, 2 * c, 4 * c, 8 * c], cw, config.symmetric_level1, rng=rng, dtype=dtype
        )
        self.enhance = EnhancementStack(
            cw,
            parse_block_placement(config.block_placement),
            n_tokens=config.n_tokens,
            token_hw=config.token_hw,
            shift_displacements=config.shift_displacements,
            shift_boundary=config.shift_boundary,
            rng=rng,
            dtype=dtype,
        )
        self.uses_audio = config.fusion != "none"
        if self.uses_audio:
            self.audio = AudioFrontend(
                AudioFrontendConfig(
                    sample_rate=config.audio_sample_rate,
                    n_fft=config.audio_n_fft,
                    hop=config.audio_hop,
                    n_mels=config.audio_n_mels,
                    segment_frames=config.audio_segment_frames,
                    overlap_ms=config.audio_overlap_ms,
                    encoder_channels=config.audio_channels,
                    feature_dim=config.audio_dim,
                ),
                rng=rng,
                dtype=dtype,
            )
            # Underscored: kept out of parameter traversal, which sees these
            # modules once through fusion_blocks.
            self._fusions = [
                make_fusion(config.fusion, cw, config.audio_dim, config.offset_clip, rng=rng, dtype=dtype)
                if level in config.fusion_levels
                else None
                for level in (1, 2, 3, 4)
            ]
            self.fusion_blocks = [f for f in self._fusions if f is not None]
        else:
            self._fusions = [None] * 4
            self.fusion_blocks = []
        self.decoder = make_decoder(config.decoder, cw, config.decoder_width, rng=rng, dtype=dtype)

    # -- forward -----------------------------------------------------------

    def audio_tokens(self, logmel: Optional[LogMelStack]) -> Optional[Tensor]:
        if logmel is None or not self.uses_audio:
            return None
        return self.audio(logmel).tokens

    def forward(self, clip: Tensor, logmel: Optional[LogMelStack] = None):
        """Returns (final map [H, W], intermediate maps, fused levels)."""
        pyramid = self.encoder(clip)
        refined = self.enhance(self.topdown(pyramid))
        tokens = self.audio_tokens(logmel)
        levels = []
        for fusion, x in zip(self._fusions, refined.levels):
            levels.append(fusion(x, tokens) if fusion is not None else x)
        final, maps = self.decoder(levels)
        return final, maps, levels

    def predict(self, clip: VideoClip, audio: Optional[AudioClip] = None) -> np.ndarray:
        """Inference path: eval mode, no tape, numpy map out."""
        was_training = self.training
        self.eval()
        try:
            x = clip.tensor(self.config.np_dtype)
            logmel = None
            if audio is not None and self.uses_audio:
                logmel = self.audio.logmel(audio)
            final, _, _ = self.forward(x, logmel)
            return final.data.copy()
        finally:
            if was_training:
                self.train()

    # -- parameter grouping for staged training ----------------------------

    AUDIO_PREFIXES = ("audio.", "fusion_blocks.")

    def parameter_groups(self) -> dict[str, dict[str, Tensor]]:
        visual, audio_fusion = {}, {}
        for name, p in self.named_parameters():
            if name.startswith(self.AUDIO_PREFIXES):
                audio_fusion[name] = p
            else:
                visual[name] = p
        return {"visual": visual, "audio_fusion": audio_fusion}


def build_model(config: ModelConfig, seed: int = 0) -> SaliencyModel:
    return SaliencyModel(config, seed=seed)

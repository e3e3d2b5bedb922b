"""Full TTS model: encoders, prosody predictor, generators, decoder.

The pitch/energy unit embedding tables are shared between the prosody
predictor and the generators' frame-level inputs, coupling the two unit
spaces. During training the generators consume ground-truth units
(teacher forcing); at inference they consume the AR predictor's output.
"""

from __future__ import annotations

import numpy as np

from .acoustic import (
    AcousticError,
    Fuse,
    Generator,
    GlobalStyleEncoder,
    PromptEncoder,
    TextEncoder,
    gaussian_upsample,
)
from .config import ModelConfig
from .decoder import StyleDecoder
from .nn import Embedding, Module
from .prosody import ProsodyPredictor, UnitStreams
from .tensor import SeededRng, Tensor, derive_seed


class TTSModel(Module):
    def __init__(self, cfg: ModelConfig, vocab: list[str], seed: int):
        widths = {cfg.text.hidden, cfg.prompt.hidden, cfg.prosody.hidden,
                  cfg.generator.hidden, cfg.decoder.hidden}
        if len(widths) != 1:
            raise ValueError(f"submodule hidden dims must agree, got {sorted(widths)}")
        self.cfg = cfg
        self.symbols = list(vocab)
        self._symbol_to_id = {s: i for i, s in enumerate(self.symbols)}
        h = cfg.text.hidden
        rng = SeededRng(derive_seed(seed, "model-init"))

        self.text_encoder = TextEncoder(cfg.text, len(self.symbols), rng.spawn("text"))
        self.prompt_encoder = PromptEncoder(cfg.prompt, cfg.n_mels, rng.spawn("prompt"))
        self.style_embedder = GlobalStyleEncoder(
            cfg.n_mels, h, cfg.decoder.global_style_dim, rng.spawn("style")
        )
        erng = rng.spawn("embeds")
        self.dur_embed = Embedding(cfg.prosody.duration_bins, h, erng)
        self.pitch_embed = Embedding(cfg.prosody.pitch_bins, h, erng)
        self.energy_embed = Embedding(cfg.prosody.energy_bins, h, erng)
        self.prosody = ProsodyPredictor(
            cfg, rng.spawn("prosody"), self.dur_embed, self.pitch_embed, self.energy_embed
        )
        use_film = not cfg.ablation.no_film
        if cfg.ablation.no_source_filter:
            self.single_gen = Generator(cfg.generator, use_film, rng.spawn("single_gen"))
        else:
            self.filter_gen = Generator(cfg.generator, use_film, rng.spawn("filter_gen"))
            self.source_gen = Generator(cfg.generator, use_film, rng.spawn("source_gen"))
        self.fuse = Fuse(h, rng.spawn("fuse"))
        self.decoder = StyleDecoder(
            cfg.decoder, cfg.n_mels, rng.spawn("decoder"),
            adaptive=not cfg.ablation.no_adaptive_kernels,
        )

    # --- lookups -------------------------------------------------------------

    def phoneme_ids(self, phonemes: list[str]) -> np.ndarray:
        try:
            return np.array([self._symbol_to_id[p] for p in phonemes], dtype=np.int64)
        except KeyError as e:
            raise AcousticError(f"unknown phoneme symbol {e.args[0]!r}") from None

    def encode_text(self, phonemes: list[str]) -> Tensor:
        return self.text_encoder(self.phoneme_ids(phonemes))

    # --- acoustic path ---------------------------------------------------------

    def representations(
        self,
        phoneme_hidden: Tensor,
        durations: np.ndarray,
        units: UnitStreams,
        prompt_hidden: Tensor | None,
    ) -> dict[str, Tensor]:
        """Frame-level filter/source representations and their fusion.

        ``durations`` are frame counts (>= 1 per phoneme); pitch/energy unit
        embeddings ride the same Gaussian upsampling as the phoneme hiddens.
        """
        sigma = self.cfg.upsample_sigma
        up_text = gaussian_upsample(phoneme_hidden, durations, sigma)
        up_energy = gaussian_upsample(self.energy_embed(units.energy), durations, sigma)
        up_pitch = gaussian_upsample(self.pitch_embed(units.pitch), durations, sigma)
        if self.cfg.ablation.no_source_filter:
            rep = self.single_gen(up_text + up_pitch + up_energy, prompt_hidden)
            zero = Tensor(np.zeros_like(rep.data))
            return {"filter": rep, "source": zero, "coarse": self.fuse.proj(rep)}
        filter_rep = self.filter_gen(up_text + up_energy, prompt_hidden)
        source_rep = self.source_gen(up_pitch + up_energy, prompt_hidden)
        return {
            "filter": filter_rep,
            "source": source_rep,
            "coarse": self.fuse(filter_rep, source_rep),
        }

    def decode_mel(
        self,
        phoneme_hidden: Tensor,
        durations: np.ndarray,
        units: UnitStreams,
        prompt_hidden: Tensor | None,
        global_style: Tensor,
        noise: np.ndarray,
        which: str = "coarse",
    ) -> Tensor:
        """Mel from the chosen representation; 'filter'/'source' zero out the
        other branch before fusion (representation analysis mode)."""
        reps = self.representations(phoneme_hidden, durations, units, prompt_hidden)
        if which == "coarse":
            coarse = reps["coarse"]
        elif which == "filter":
            coarse = self.fuse(reps["filter"], Tensor(np.zeros_like(reps["filter"].data)))
        elif which == "source":
            coarse = self.fuse(Tensor(np.zeros_like(reps["source"].data)), reps["source"])
        else:
            raise ValueError(f"unknown representation {which!r}")
        return self.decoder(coarse, global_style, noise)

    def draw_noise(self, seed: int) -> np.ndarray:
        return SeededRng(derive_seed(seed, "decoder-noise")).normal((1, self.cfg.decoder.noise_dim))

    def generator_parameters(self):
        """All trainable parameters (the GAN 'generator' side)."""
        return list(self.named_parameters())

    def prosody_parameter_names(self) -> set[str]:
        names = {name for name, _ in self.prosody.named_parameters(prefix="prosody.")}
        # shared unit embeddings are owned by the model, listed under their
        # first path; schedule them with the prosody group
        names |= {"dur_embed.table", "pitch_embed.table", "energy_embed.table"}
        return names

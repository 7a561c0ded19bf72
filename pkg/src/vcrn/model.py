"""Full captioner: dictionary -> concept selection -> conceptual integration decoder."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import numerics as nx
from .corpus import BOS_ID, PAD_ID
from .decoder import DecoderConfig, DecoderInputs, DecoderState, StepOutput, decoder_step, init_decoder, prepare_inputs
from .encoder import EncoderConfig, init_encoder, project_inputs, vcs_encode
from .errors import ConfigError, DimensionError
from .numerics import ParameterStore, Tensor

DICTIONARY_PARAM = "dictionary.centers"


@dataclass
class ModelConfig:
    vocab_size: int
    d_in: int
    num_centers: int = 16
    d_model: int = 32
    d_hid: int = 32
    heads: int = 4
    blocks: int = 1
    dropout_p: float = 0.1
    strategy: str = "GATE"
    use_dictionary: bool = True
    gate_fc: bool = False
    init_range: float = 0.08
    dtype: str = "float64"

    def __post_init__(self):
        self.strategy = self.strategy.upper()
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.d_in < 2:
            raise ConfigError("input feature dimension must be at least 2")
        if self.use_dictionary and self.num_centers < 1:
            raise ConfigError("the dictionary branch needs at least one center")
        # validate the sub-configs eagerly
        self.encoder_config()
        self.decoder_config()

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(self.d_in, self.d_model, self.heads, self.blocks, self.dropout_p)

    def decoder_config(self) -> DecoderConfig:
        return DecoderConfig(
            vocab_size=self.vocab_size,
            d_model=self.d_model,
            d_hid=self.d_hid,
            strategy=self.strategy,
            gate_fc=self.gate_fc,
            mha_heads=self.heads,
            use_dictionary=self.use_dictionary,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**values)


@dataclass
class Encoded:
    inputs: DecoderInputs
    similarities: list[Tensor]  # per block, (B, H, L, M)


class VCRN:
    """Parameters plus the forward computations of the captioner.

    The input projection is shared by frames and dictionary centers; the
    centers themselves live in the store under ``dictionary.centers`` and are
    trainable only when ``fixed_dictionary`` is off.
    """

    def __init__(self, config: ModelConfig, centers: np.ndarray | None = None, seed: int = 0,
                 fixed_dictionary: bool = True):
        self.config = config
        self.enc_cfg = config.encoder_config()
        self.dec_cfg = config.decoder_config()
        self.store = ParameterStore(np.dtype(config.dtype))
        rng = np.random.default_rng(seed)
        if config.use_dictionary:
            if centers is None:
                centers = rng.uniform(-config.init_range, config.init_range, size=(config.num_centers, config.d_in))
            centers = np.asarray(centers)
            if centers.shape != (config.num_centers, config.d_in):
                raise DimensionError(
                    f"dictionary is {centers.shape}, model expects {(config.num_centers, config.d_in)}"
                )
            self.store.add(DICTIONARY_PARAM, centers, requires_grad=not fixed_dictionary)
        init_encoder(self.store, self.enc_cfg, rng, config.init_range)
        init_decoder(self.store, self.dec_cfg, rng, config.init_range)

    @property
    def dtype(self):
        return self.store.dtype

    @property
    def fixed_dictionary(self) -> bool:
        return DICTIONARY_PARAM not in self.store or not self.store[DICTIONARY_PARAM].requires_grad

    def set_fixed_dictionary(self, fixed: bool) -> None:
        if DICTIONARY_PARAM in self.store:
            t = self.store[DICTIONARY_PARAM]
            t.requires_grad = not fixed
            t.grad = None if fixed else np.zeros_like(t.values)

    # ------------------------------------------------------------------

    def encode(self, features, train: bool = False, rng: np.random.Generator | None = None,
               concept_offset: np.ndarray | None = None) -> Encoded:
        """``features``: ``(B, L, d_in)`` raw frames.

        ``concept_offset`` is added to the concept features (probing only).
        """
        feats = np.asarray(features, dtype=self.dtype)
        if feats.ndim == 2:
            feats = feats[None]
        if feats.shape[-1] != self.config.d_in:
            raise DimensionError(f"features have dim {feats.shape[-1]}, model expects {self.config.d_in}")
        frames = project_inputs(Tensor(feats), self.store)
        sims: list[Tensor] = []
        concepts = None
        if self.config.use_dictionary:
            projected_dict = project_inputs(self.store[DICTIONARY_PARAM], self.store)
            concepts, sims = vcs_encode(frames, projected_dict, self.store, self.enc_cfg, train, rng)
            if concept_offset is not None:
                concepts = nx.add(concepts, Tensor(np.asarray(concept_offset, dtype=self.dtype)))
        return Encoded(prepare_inputs(frames, concepts, self.store), sims)

    def initial_state(self, batch: int) -> DecoderState:
        return DecoderState.zeros(batch, self.config.d_hid, self.dtype)

    def step(self, encoded: Encoded, prev_tokens, state: DecoderState, **probe) -> StepOutput:
        return decoder_step(encoded.inputs, prev_tokens, state, self.store, self.dec_cfg, **probe)

    def teacher_forced(self, features, tokens, train: bool = False, rng: np.random.Generator | None = None):
        """Loss and accuracy statistics under teacher forcing.

        ``tokens``: ``(B, T + 1)`` ids starting with bos, padded with pad.
        Returns ``(loss, correct, counted)`` where ``loss`` is the per-sequence
        summed cross-entropy averaged over the batch.
        """
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim != 2 or tokens.shape[1] < 2:
            raise DimensionError(f"token matrix must be (B, T+1) with T >= 1, got {tokens.shape}")
        batch = tokens.shape[0]
        encoded = self.encode(features, train, rng)
        if encoded.inputs.frames.shape[0] != batch:
            raise DimensionError(f"{encoded.inputs.frames.shape[0]} videos but {batch} captions")
        state = self.initial_state(batch)
        total = None
        correct = counted = 0
        for t in range(tokens.shape[1] - 1):
            targets = tokens[:, t + 1]
            mask = targets != PAD_ID
            if not mask.any():
                break
            out = self.step(encoded, tokens[:, t], state)
            state = out.state
            step_loss = nx.cross_entropy_logits(out.logits, targets, mask.astype(self.dtype))
            total = step_loss if total is None else nx.add(total, step_loss)
            pred = out.logits.values.argmax(axis=1)
            correct += int(((pred == targets) & mask).sum())
            counted += int(mask.sum())
        if total is None:
            total = Tensor(np.zeros((), dtype=self.dtype))
        return nx.scale(total, 1.0 / batch), correct, counted

    def loss(self, features, tokens, train: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        return self.teacher_forced(features, tokens, train, rng)[0]

    def start_tokens(self, batch: int) -> np.ndarray:
        return np.full(batch, BOS_ID, dtype=np.int64)

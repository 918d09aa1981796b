"""Compact causal transformer that reasons over the visual token.

The visual token is prepended as a soft prompt to a fixed instruction
sequence; self-attention query/value projections carry low-rank adapters
while the randomly initialized base weights stay frozen; multi-label logits
are read from the last position's hidden state. A learnable-text mode
replaces the visual token with k static trained vectors (the video then has
no influence on the output, by construction).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigurationError, DimensionError, ValidationError
from .tensorcore import Rng, xavier_uniform

PROMPT_TEXT = "Analyze the facial features to classify action units:"
BOS = "<bos>"


@dataclass(frozen=True)
class PromptSpec:
    text: str
    vocabulary: tuple[str, ...]
    token_ids: tuple[int, ...]

    @property
    def length(self) -> int:
        return len(self.token_ids)


def build_prompt_spec(text: str = PROMPT_TEXT) -> PromptSpec:
    """Whitespace vocabulary over the instruction string, BOS first."""
    words = text.split()
    vocab: list[str] = [BOS]
    for w in words:
        if w not in vocab:
            vocab.append(w)
    ids = [0] + [vocab.index(w) for w in words]
    return PromptSpec(text=text, vocabulary=tuple(vocab), token_ids=tuple(ids))


def tokenize(spec: PromptSpec, text: str) -> list[int]:
    table = {w: i for i, w in enumerate(spec.vocabulary)}
    out = []
    for w in text.split():
        if w not in table:
            raise ValidationError(f"token {w!r} not in the fixed prompt vocabulary")
        out.append(table[w])
    return out


@dataclass
class ReasonerConfig:
    n_aus: int
    d_model: int = 256
    layers: int = 2
    heads: int = 4
    ffn_mult: int = 4
    base_frozen: bool = True
    prompt_mode: str = "visual_token"  # "visual_token" | "learnable_text"
    prompt_len: int = 4                # k, learnable_text mode only
    lora_rank: int = 4                 # 0 disables adapters
    lora_alpha: float = 8.0

    def validate(self) -> None:
        if self.d_model % self.heads != 0:
            raise ConfigurationError(f"d_model={self.d_model} not divisible by heads={self.heads}")
        if self.prompt_mode not in ("visual_token", "learnable_text"):
            raise ConfigurationError(f"unknown prompt_mode {self.prompt_mode!r}")
        if self.lora_rank < 0:
            raise ConfigurationError(f"lora_rank must be >= 0, got {self.lora_rank}")
        if self.lora_rank > self.d_model:
            raise ConfigurationError(
                f"lora_rank={self.lora_rank} exceeds projection dims ({self.d_model})")
        if self.n_aus < 1:
            raise ConfigurationError("n_aus must be positive")
        if self.prompt_len < 1:
            raise ConfigurationError("prompt_len must be >= 1")


class LoraAdapter(nn.Module):
    """Rank-r update (alpha/r) * b @ a; b starts at zero so the adapted
    projection equals the base projection at step 0."""

    def __init__(self, d_in: int, d_out: int, rank: int, alpha: float,
                 rng: Rng, dtype: torch.dtype = torch.float32):
        super().__init__()
        if rank > min(d_in, d_out):
            raise ConfigurationError(f"lora rank {rank} > min(d_in, d_out) = {min(d_in, d_out)}")
        self.rank = rank
        self.alpha = alpha
        self.a = nn.Parameter(xavier_uniform(rng, (rank, d_in), d_in, rank, dtype))
        self.b = nn.Parameter(torch.zeros(d_out, rank, dtype=dtype))

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def delta(self, x: torch.Tensor) -> torch.Tensor:
        return self.scaling * ((x @ self.a.T) @ self.b.T)

    def materialized(self) -> torch.Tensor:
        """Dense (d_out, d_in) weight update, for oracle comparison."""
        return self.scaling * (self.b @ self.a)


def lora_linear(x: torch.Tensor, base: nn.Linear, adapter: LoraAdapter | None) -> torch.Tensor:
    y = base(x)
    if adapter is not None:
        y = y + adapter.delta(x)
    return y


class DecoderBlock(nn.Module):
    def __init__(self, cfg: ReasonerConfig, rng: Rng, dtype: torch.dtype):
        super().__init__()
        d = cfg.d_model
        self.heads = cfg.heads
        self.head_dim = d // cfg.heads
        self.ln1 = nn.LayerNorm(d, dtype=dtype)
        self.ln2 = nn.LayerNorm(d, dtype=dtype)
        self.q = nn.Linear(d, d, dtype=dtype)
        self.k = nn.Linear(d, d, dtype=dtype)
        self.v = nn.Linear(d, d, dtype=dtype)
        self.o = nn.Linear(d, d, dtype=dtype)
        self.ffn1 = nn.Linear(d, cfg.ffn_mult * d, dtype=dtype)
        self.ffn2 = nn.Linear(cfg.ffn_mult * d, d, dtype=dtype)
        for lin in (self.q, self.k, self.v, self.o, self.ffn1, self.ffn2):
            with torch.no_grad():
                lin.weight.copy_(xavier_uniform(rng, lin.weight.shape, lin.in_features,
                                                lin.out_features, dtype))
                lin.bias.zero_()
        self.q_adapter: LoraAdapter | None = None
        self.v_adapter: LoraAdapter | None = None

    def attach_adapters(self, cfg: ReasonerConfig, rng: Rng, dtype: torch.dtype) -> None:
        d = cfg.d_model
        self.q_adapter = LoraAdapter(d, d, cfg.lora_rank, cfg.lora_alpha, rng, dtype)
        self.v_adapter = LoraAdapter(d, d, cfg.lora_rank, cfg.lora_alpha, rng, dtype)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        b, s, d = x.shape
        h = self.ln1(x)
        q = lora_linear(h, self.q, self.q_adapter)
        k = self.k(h)
        v = lora_linear(h, self.v, self.v_adapter)
        q = q.view(b, s, self.heads, self.head_dim).transpose(1, 2)
        k = k.view(b, s, self.heads, self.head_dim).transpose(1, 2)
        v = v.view(b, s, self.heads, self.head_dim).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim) + mask
        attn = torch.softmax(scores, dim=-1)
        ctx = (attn @ v).transpose(1, 2).reshape(b, s, d)
        x = x + self.o(ctx)
        h = self.ln2(x)
        return x + self.ffn2(F.relu(self.ffn1(h)))


class Reasoner(nn.Module):
    def __init__(self, cfg: ReasonerConfig, rng: Rng, prompt: PromptSpec | None = None,
                 dtype: torch.dtype = torch.float32):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.prompt = prompt or build_prompt_spec()
        d = cfg.d_model
        base_rng = rng.derive(0)
        adapter_rng = rng.derive(1)
        head_rng = rng.derive(2)
        prompt_rng = rng.derive(3)

        vocab = len(self.prompt.vocabulary)
        max_len = max(1, cfg.prompt_len) + self.prompt.length
        self.tok_emb = nn.Parameter(base_rng.normal((vocab, d), 0.0, 0.02, dtype))
        self.pos_emb = nn.Parameter(base_rng.normal((max_len, d), 0.0, 0.02, dtype))
        self.blocks = nn.ModuleList(
            [DecoderBlock(cfg, base_rng.derive(10 + i), dtype) for i in range(cfg.layers)])
        self.ln_final = nn.LayerNorm(d, dtype=dtype)
        self.classifier = nn.Linear(d, cfg.n_aus, dtype=dtype)
        with torch.no_grad():
            self.classifier.weight.copy_(
                xavier_uniform(head_rng, self.classifier.weight.shape, d, cfg.n_aus, dtype))
            self.classifier.bias.zero_()
        if cfg.lora_rank > 0:
            for i, blk in enumerate(self.blocks):
                blk.attach_adapters(cfg, adapter_rng.derive(i), dtype)
        if cfg.prompt_mode == "learnable_text":
            self.learned_prompt = nn.Parameter(
                prompt_rng.normal((cfg.prompt_len, d), 0.0, 0.02, dtype))
        else:
            self.learned_prompt = None
        if cfg.base_frozen:
            self._freeze_base()
        ids = torch.tensor(self.prompt.token_ids, dtype=torch.long)
        self.register_buffer("prompt_ids", ids, persistent=False)

    def _freeze_base(self) -> None:
        adapters = {id(p) for blk in self.blocks if blk.q_adapter is not None
                    for p in (*blk.q_adapter.parameters(), *blk.v_adapter.parameters())}
        heads = {id(p) for p in self.classifier.parameters()}
        if self.learned_prompt is not None:
            heads.add(id(self.learned_prompt))
        for p in self.parameters():
            if id(p) not in adapters and id(p) not in heads:
                p.requires_grad_(False)

    def base_parameters(self) -> list[tuple[str, nn.Parameter]]:
        skip = ("classifier.", "learned_prompt")
        return [(n, p) for n, p in self.named_parameters()
                if "adapter" not in n and not n.startswith(skip)]

    def sequence_length(self) -> int:
        lead = self.cfg.prompt_len if self.cfg.prompt_mode == "learnable_text" else 1
        return lead + self.prompt.length

    def embed_sequence(self, visual_token: torch.Tensor | None,
                       batch_size: int | None = None) -> torch.Tensor:
        """Soft prompt positions followed by instruction-token + positional
        embeddings. In visual mode position 0 holds the visual token; in
        learnable-text mode positions 0..k-1 hold the trained vectors and the
        video plays no part."""
        cfg = self.cfg
        prompt_len = self.prompt.length
        if cfg.prompt_mode == "learnable_text":
            if batch_size is None:
                batch_size = 1 if visual_token is None else visual_token.shape[0]
            lead = self.learned_prompt[None].expand(batch_size, -1, -1)
            k = cfg.prompt_len
        else:
            if visual_token is None:
                raise ValidationError("visual_token mode requires a visual token")
            if visual_token.ndim != 2 or visual_token.shape[1] != cfg.d_model:
                raise DimensionError(
                    f"visual token must be (B, {cfg.d_model}), got {tuple(visual_token.shape)}")
            batch_size = visual_token.shape[0]
            lead = visual_token[:, None, :]
            k = 1
        toks = self.tok_emb[self.prompt_ids] + self.pos_emb[k:k + prompt_len]
        toks = toks[None].expand(batch_size, -1, -1)
        return torch.cat([lead, toks], dim=1)

    def hidden_states(self, seq: torch.Tensor) -> torch.Tensor:
        """Final-layer hidden states (B, S, d) after the last layer norm."""
        s = seq.shape[1]
        mask = torch.full((s, s), float("-inf"), dtype=seq.dtype).triu(1)
        x = seq
        for blk in self.blocks:
            x = blk(x, mask)
        return self.ln_final(x)

    def reason_and_classify(self, seq: torch.Tensor) -> torch.Tensor:
        return self.classifier(self.hidden_states(seq)[:, -1])

    def forward(self, visual_token: torch.Tensor | None,
                batch_size: int | None = None) -> torch.Tensor:
        return self.reason_and_classify(self.embed_sequence(visual_token, batch_size))

    def trainable_parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters() if p.requires_grad)

    def trainable_parameter_bound(self) -> int:
        """Analytic bound: adapters + classifier + learnable prompt vectors."""
        cfg = self.cfg
        adapters = cfg.layers * 2 * 2 * cfg.lora_rank * cfg.d_model
        classifier = cfg.d_model * cfg.n_aus + cfg.n_aus
        prompts = cfg.prompt_len * cfg.d_model if cfg.prompt_mode == "learnable_text" else 0
        return adapters + classifier + prompts

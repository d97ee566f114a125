"""Question generation network.

Feature-enriched biLSTM encoder with gated self-matching over the passage,
an attentional LSTM decoder with maxout readout, and a pointer-style copy
path over an extended per-batch vocabulary. The decoder is parametrized by
a name prefix so the tail-generation head can reuse the same step function
with its own weights.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .corpus import BOS, EOS, UNK
from .nn import tensor as T
from .nn.layers import (init_bilstm, init_linear, init_stacked_lstm,
                        init_uniform, bilstm, linear, stacked_lstm_step)
from .nn.params import ParameterSet
from .nn.tensor import Tensor

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12

# Running count of probability-floor events in sequence_nll; a nonzero value
# means some target token received (numerically) zero mass.
_clamp_events = 0


def nll_clamp_events() -> int:
    return _clamp_events


def reset_nll_clamp_events() -> None:
    global _clamp_events
    _clamp_events = 0


# -- parameter construction -------------------------------------------------


def init_decoder_block(params: ParameterSet, prefix: str, group: str,
                       rng: np.random.Generator, *, emb_dim: int, hidden: int,
                       layers: int, vocab_size: int, init_dim: int) -> None:
    """Weights for one attentional decoder under ``prefix``.

    ``init_dim`` is the width of the encoder summary that seeds the initial
    hidden states. The blend block mixes passage context (c), optional
    knowledge context (k) and the LSTM state (s) into the readout input.
    """
    for k in range(layers):
        init_linear(params, f"{prefix}.init.l{k}", group, init_dim, hidden, rng)
    init_stacked_lstm(params, f"{prefix}.cell", group, emb_dim + hidden, hidden, layers, rng)
    params.add(f"{prefix}.blend.c.W", init_uniform(rng, (2 * hidden, hidden)), group)
    params.add(f"{prefix}.blend.k.W", init_uniform(rng, (2 * hidden, hidden)), group)
    params.add(f"{prefix}.blend.s.W", init_uniform(rng, (hidden, hidden)), group)
    params.add(f"{prefix}.blend.b", np.zeros(hidden), group)
    init_linear(params, f"{prefix}.readout", group, 3 * hidden, 2 * hidden, rng)
    init_linear(params, f"{prefix}.out", group, hidden, vocab_size, rng)
    init_linear(params, f"{prefix}.copy", group, 3 * hidden + emb_dim, 1, rng)


def init_qg_parameters(params: ParameterSet, rng: np.random.Generator, *,
                       vocab_size: int, emb_dim: int, feat_dim: int,
                       hidden: int, layers: int,
                       n_bio: int, n_pos: int, n_ner: int) -> None:
    g = "qg_core"
    params.add("emb.word", init_uniform(rng, (vocab_size, emb_dim)), g)
    params.add("emb.bio", init_uniform(rng, (n_bio, feat_dim)), g)
    params.add("emb.ner", init_uniform(rng, (n_ner, feat_dim)), g)
    params.add("emb.pos", init_uniform(rng, (n_pos, feat_dim)), g)
    init_bilstm(params, "enc", g, emb_dim + 3 * feat_dim, hidden, layers, rng)
    params.add("selfmatch.W", init_uniform(rng, (2 * hidden, 2 * hidden)), g)
    init_linear(params, "gate", g, 4 * hidden, 1, rng)
    # shared projection for attention over the self-matched passage states;
    # both decoders score against it
    params.add("attn.Wh", init_uniform(rng, (2 * hidden, hidden)), g)
    init_decoder_block(params, "dec", g, rng, emb_dim=emb_dim, hidden=hidden,
                       layers=layers, vocab_size=vocab_size, init_dim=hidden)


def _layer_count(params: ParameterSet, pattern: str) -> int:
    n = 0
    while pattern.format(n) in params:
        n += 1
    return n


def length_mask(lengths: np.ndarray, width: int) -> np.ndarray:
    """Bool [B, width] marking real (non-pad) positions."""
    return np.arange(width)[None, :] < np.asarray(lengths)[:, None]


def clamp_to_vocab(ids: np.ndarray, vocab_size: int) -> np.ndarray:
    """Map extended-vocabulary ids back to UNK for embedding lookups."""
    ids = np.asarray(ids)
    return np.where(ids >= vocab_size, UNK, ids)


# -- encoder ----------------------------------------------------------------


@dataclass
class EncoderOutput:
    h: Tensor            # [B, Lp, 2d] contextual states
    h_hat: Tensor        # [B, Lp, 2d] gated self-matched states
    f: Tensor            # [B, Lp, 2d] self-match summaries (diagnostic)
    g: Tensor            # [B, Lp, 1] gate values (diagnostic)
    mask: np.ndarray     # [B, Lp] bool, False on pads
    proj: Tensor         # [B, Lp, d] h_hat through the attention projection
    bw_final: Tensor     # [B, d] top-layer backward final state


def embed_source(params: ParameterSet, batch) -> Tensor:
    """Per-token features: word, answer-position, entity and POS embeddings."""
    parts = [
        T.embedding(params["emb.word"], batch.passage_ids),
        T.embedding(params["emb.bio"], batch.bio_ids),
        T.embedding(params["emb.ner"], batch.ner_ids),
        T.embedding(params["emb.pos"], batch.pos_ids),
    ]
    return T.concat(parts, axis=-1)


def self_match(params: ParameterSet, h: Tensor, mask: np.ndarray) -> tuple[Tensor, Tensor]:
    """Bilinear self-attention summary f and blend gate g for each position."""
    scores = T.matmul(T.matmul(h, params["selfmatch.W"]), T.swapaxes(h, -1, -2))
    attn = T.softmax(scores, axis=-1, mask=mask[:, None, :])
    f = T.matmul(attn, h)
    g = T.sigmoid(linear(params, "gate", T.concat([h, f], axis=-1)))
    return f, g


def encode_passage(params: ParameterSet, batch, *, drop_rate: float = 0.0,
                   training: bool = False,
                   rng: np.random.Generator | None = None) -> EncoderOutput:
    e = embed_source(params, batch)
    layers = _layer_count(params, "enc.l{}.fw.W")
    h, _, bw_final = bilstm(params, "enc", e, batch.passage_lengths, layers,
                            drop_rate, training, rng)
    mask = length_mask(batch.passage_lengths, h.shape[1])
    f, g = self_match(params, h, mask)
    h_hat = T.add(T.mul(g, f), T.mul(1.0 - g, h))
    proj = T.matmul(h_hat, params["attn.Wh"])
    return EncoderOutput(h=h, h_hat=h_hat, f=f, g=g, mask=mask, proj=proj,
                         bw_final=bw_final)


# -- decoder ----------------------------------------------------------------


@dataclass
class KnowledgeMemory:
    """Rows the decoder may attend to besides the passage."""
    rows: Tensor         # [B, Lk, 2d]
    mask: np.ndarray     # [B, Lk]
    proj: Tensor         # [B, Lk, d]


def make_memory(params: ParameterSet, proj_name: str, rows: Tensor,
                mask: np.ndarray) -> KnowledgeMemory:
    return KnowledgeMemory(rows=rows, mask=mask,
                           proj=T.matmul(rows, params[proj_name]))


@dataclass
class DecoderState:
    states: list[tuple[Tensor, Tensor]]   # per-layer (h, c)
    s_tilde: Tensor                       # [B, d] readout feed for the next step
    s: Tensor | None = None               # top hidden after the last step
    c: Tensor | None = None               # passage context
    alpha: Tensor | None = None           # [B, Lp] passage attention
    k: Tensor | None = None               # knowledge context, zeros when absent
    p_g: Tensor | None = None             # [B, 1] generate-vs-copy gate


@dataclass
class OutputDistribution:
    p_vocab: Tensor      # [B, V]
    p_copy: Tensor       # [B, extended]
    p: Tensor            # [B, extended] mixture


def init_decoder_state(params: ParameterSet, prefix: str, source: Tensor) -> DecoderState:
    """Seed the decoder from an encoder summary (one projection per layer)."""
    layers = _layer_count(params, prefix + ".init.l{}.W")
    hidden = params[f"{prefix}.cell.l0.W"].shape[1] // 4
    nb = source.shape[0]
    states = []
    for k in range(layers):
        h0 = T.tanh(linear(params, f"{prefix}.init.l{k}", source))
        states.append((h0, Tensor(np.zeros((nb, hidden)))))
    return DecoderState(states=states, s_tilde=Tensor(np.zeros((nb, hidden))))


def _attend(proj: Tensor, query: Tensor, mask: np.ndarray) -> Tensor:
    nb, width, d = proj.shape
    scores = T.matmul(proj, T.reshape(query, (nb, d, 1)))
    return T.softmax(T.reshape(scores, (nb, width)), axis=-1, mask=mask)


def _weighted_rows(alpha: Tensor, rows: Tensor) -> Tensor:
    nb, width = alpha.shape
    ctx = T.matmul(T.reshape(alpha, (nb, 1, width)), rows)
    return T.reshape(ctx, (nb, rows.shape[-1]))


def copy_distribution(alpha: Tensor, copy_ids: np.ndarray, extended_size: int) -> Tensor:
    """Aggregate attention mass per extended-vocabulary id.

    Pad positions carry exactly zero attention, so the pad bucket stays empty.
    """
    return T.scatter_sum(alpha, copy_ids, extended_size)


def decode_step(params: ParameterSet, prefix: str, y_prev: np.ndarray,
                state: DecoderState, enc: EncoderOutput,
                kmem: KnowledgeMemory | None, copy_ids: np.ndarray,
                extended_size: int, *, drop_rate: float = 0.0,
                training: bool = False,
                rng: np.random.Generator | None = None
                ) -> tuple[OutputDistribution, DecoderState]:
    """One decoder step over a batch.

    The blend terms are summed in fixed order c, k, s so dropping the k term
    is numerically identical to a zeroed k-slice.
    """
    vocab_size = params["emb.word"].shape[0]
    layers = _layer_count(params, prefix + ".cell.l{}.W")
    emb = T.embedding(params["emb.word"], clamp_to_vocab(y_prev, vocab_size))
    x = T.concat([emb, state.s_tilde], axis=-1)
    s, new_states = stacked_lstm_step(params, f"{prefix}.cell", x, state.states,
                                      layers, drop_rate, training, rng)
    nb, hidden = s.shape

    alpha = _attend(enc.proj, s, enc.mask)
    c = _weighted_rows(alpha, enc.h_hat)

    pre = T.matmul(c, params[f"{prefix}.blend.c.W"])
    if kmem is not None:
        beta = _attend(kmem.proj, s, kmem.mask)
        k = _weighted_rows(beta, kmem.rows)
        pre = T.add(pre, T.matmul(k, params[f"{prefix}.blend.k.W"]))
    else:
        k = Tensor(np.zeros((nb, 2 * hidden)))
    pre = T.add(pre, T.matmul(s, params[f"{prefix}.blend.s.W"]))
    s_tilde = T.tanh(T.add(pre, params[f"{prefix}.blend.b"]))

    z = T.dropout(T.concat([c, s], axis=-1), drop_rate, training, rng)
    u = T.maxout(T.tanh(linear(params, f"{prefix}.readout", z)))
    p_vocab = T.softmax(linear(params, f"{prefix}.out", u), axis=-1)

    p_g = T.sigmoid(linear(params, f"{prefix}.copy", T.concat([c, s, emb], axis=-1)))
    p_copy = copy_distribution(alpha, copy_ids, extended_size)
    if extended_size > vocab_size:
        tail = Tensor(np.zeros((nb, extended_size - vocab_size)))
        p_vocab_ext = T.concat([p_vocab, tail], axis=-1)
    else:
        p_vocab_ext = p_vocab
    p = T.add(T.mul(p_vocab_ext, p_g), T.mul(p_copy, 1.0 - p_g))

    out = OutputDistribution(p_vocab=p_vocab, p_copy=p_copy, p=p)
    new_state = DecoderState(states=new_states, s_tilde=s_tilde, s=s, c=c,
                             alpha=alpha, k=k, p_g=p_g)
    return out, new_state


# -- teacher forcing and loss -------------------------------------------------


def teacher_forced_steps(params: ParameterSet, prefix: str, enc: EncoderOutput,
                         kmem: KnowledgeMemory | None, target_ids: np.ndarray,
                         target_lengths: np.ndarray, copy_ids: np.ndarray,
                         extended_size: int, *, init_source: Tensor,
                         drop_rate: float = 0.0, training: bool = False,
                         rng: np.random.Generator | None = None
                         ) -> list[OutputDistribution]:
    """Run the decoder with gold inputs; step t predicts target_ids[:, t+1]."""
    state = init_decoder_state(params, prefix, init_source)
    steps = []
    for t in range(int(np.max(target_lengths)) - 1):
        out, state = decode_step(params, prefix, target_ids[:, t], state, enc,
                                 kmem, copy_ids, extended_size,
                                 drop_rate=drop_rate, training=training, rng=rng)
        steps.append(out)
    return steps


def sequence_nll(steps: list[OutputDistribution], target_ids: np.ndarray,
                 target_lengths: np.ndarray) -> Tensor:
    """Mean negative log-likelihood: per-sample mean over its own real steps,
    then mean over the batch. Zero-probability targets are floored at
    PROB_FLOOR and counted (see nll_clamp_events)."""
    global _clamp_events
    n_steps = len(steps)
    picked = T.stack([T.gather_last(steps[t].p, target_ids[:, t + 1])
                      for t in range(n_steps)], axis=1)
    valid = length_mask(np.asarray(target_lengths) - 1, n_steps)
    floored = int(np.sum((picked.data < PROB_FLOOR) & valid))
    if floored:
        _clamp_events += floored
        log.warning("floored %d zero-probability target tokens", floored)
    logp = T.log(T.clamp_min(picked, PROB_FLOOR))
    weights = valid / (np.asarray(target_lengths, dtype=np.float64) - 1.0)[:, None]
    per_sample = T.sum_(T.mul(logp, weights), axis=1)
    return T.mul(T.mean(per_sample), -1.0)


def qg_loss(steps: list[OutputDistribution], question_ids: np.ndarray,
            question_lengths: np.ndarray) -> Tensor:
    """Question loss: mean NLL of the gold question under the mixture."""
    return sequence_nll(steps, question_ids, question_lengths)


# -- generation ---------------------------------------------------------------


@dataclass
class BeamHypothesis:
    ids: list[int]        # generated ids, extended vocabulary, no BOS/EOS
    score: float          # length-normalized log probability
    logprob: float        # raw summed log probability


def greedy_decode(params: ParameterSet, prefix: str, enc: EncoderOutput,
                  kmem: KnowledgeMemory | None, copy_ids: np.ndarray,
                  extended_size: int, *, max_len: int,
                  init_source: Tensor | None = None) -> list[int]:
    """Argmax decoding for a single sample; stops at EOS or max_len tokens."""
    if enc.mask.shape[0] != 1:
        raise T.ShapeError("greedy_decode runs one sample at a time")
    src = enc.bw_final if init_source is None else init_source
    state = init_decoder_state(params, prefix, src)
    y = np.array([BOS])
    ids: list[int] = []
    for _ in range(max_len):
        out, state = decode_step(params, prefix, y, state, enc, kmem,
                                 copy_ids, extended_size)
        tok = int(np.argmax(out.p.data[0]))
        if tok == EOS:
            break
        ids.append(tok)
        y = np.array([tok])
    return ids


def beam_search(params: ParameterSet, prefix: str, enc: EncoderOutput,
                kmem: KnowledgeMemory | None, copy_ids: np.ndarray,
                extended_size: int, *, beam: int, max_len: int,
                length_penalty: float = 0.7,
                init_source: Tensor | None = None) -> BeamHypothesis:
    """Beam search for a single sample.

    Scores are summed log probabilities normalized by length**length_penalty
    at finishing time; candidate ordering breaks ties toward lower token ids,
    which makes beam=1 reproduce greedy decoding exactly.
    """
    if enc.mask.shape[0] != 1:
        raise T.ShapeError("beam_search runs one sample at a time")
    if beam < 1:
        raise ValueError(f"beam must be >= 1, got {beam}")
    src = enc.bw_final if init_source is None else init_source
    live: list[tuple[tuple[int, ...], float, DecoderState]] = [
        ((), 0.0, init_decoder_state(params, prefix, src))]
    done: list[tuple[float, float, tuple[int, ...]]] = []
    for _ in range(max_len):
        if not live:
            break
        cands = []
        for ids, logp, state in live:
            y = np.array([ids[-1] if ids else BOS])
            out, nstate = decode_step(params, prefix, y, state, enc, kmem,
                                      copy_ids, extended_size)
            lp = np.log(np.maximum(out.p.data[0], PROB_FLOOR))
            for tok in np.argsort(-lp, kind="stable")[:beam]:
                cands.append((logp + float(lp[tok]), ids, int(tok), nstate))
        cands.sort(key=lambda cand: (-cand[0], cand[1] + (cand[2],)))
        live = []
        for total, ids, tok, nstate in cands[:beam]:
            if tok == EOS:
                norm = total / (len(ids) + 1) ** length_penalty
                done.append((norm, total, ids))
            else:
                live.append((ids + (tok,), total, nstate))
    for ids, logp, _ in live:
        done.append((logp / max(len(ids), 1) ** length_penalty, logp, ids))
    norm, raw, ids = max(done, key=lambda d: (d[0], tuple(-i for i in d[2])))
    return BeamHypothesis(ids=list(ids), score=norm, logprob=raw)

"""Denoising-trajectory trace data model and its on-disk streaming format.

A trace file is JSON Lines: one header object on the first line, then one
instance object per line.  An optional gzip layer is detected by magic bytes.
All log-probabilities and entropies are natural log (nats).  Floats are
written with ``repr`` precision, so a read/write round trip is bit exact.

Header line::

    {"format_version": 1, "model_name": ..., "task": ...,
     "max_steps_per_block": ..., "block_length": ..., "num_blocks": ...,
     "vocab": {"entries": [...], "mask_id": ..., "special_ids": [...]}}

Instance lines mirror :class:`InstanceTrace` field names.  The optional
``precomputed_similarity`` mapping uses string keys ``"view:block:step"``.

Step indices are 1-based generation order within a block (step 1 is the
first denoising pass); step 0 denotes the all-masked state before any pass.
Every step logs an observation for every in-block position, including
positions that are already committed (their token and log-probability are
repeated).  ``committed_now`` marks the final masked-to-unmasked transition
of a position; sampler re-masking of a tentatively placed token is recorded
via ``remasked_now`` and never as a second commit.
"""

from __future__ import annotations

import gzip
import io
import json
import math
import os
from dataclasses import dataclass, field
from typing import IO, Iterable, Iterator

FORMAT_VERSION = 1

MASK_SENTINEL = "␣[MASK]"

VIEWS = ("block", "last", "last_prefix", "full")


class TraceError(Exception):
    """Base class for trace I/O and consistency errors."""


class TraceVersionError(TraceError):
    def __init__(self, found: object, expected: int = FORMAT_VERSION):
        super().__init__(f"unsupported trace format_version {found!r}, expected {expected}")
        self.found = found
        self.expected = expected


class TraceFormatError(TraceError):
    """Malformed record; carries the byte offset of the offending line."""

    def __init__(self, message: str, offset: int, instance_id: str | None = None):
        where = f" (instance {instance_id!r})" if instance_id else ""
        super().__init__(f"{message} at byte offset {offset}{where}")
        self.offset = offset
        self.instance_id = instance_id


@dataclass(frozen=True)
class Vocab:
    """Dense token-id vocabulary; id ``i`` has surface string ``entries[i]``."""

    entries: tuple[str, ...]
    mask_id: int
    special_ids: frozenset[int]

    def __post_init__(self):
        if not 0 <= self.mask_id < len(self.entries):
            raise ValueError(f"mask_id {self.mask_id} outside vocabulary of size {len(self.entries)}")
        bad = [i for i in self.special_ids if not 0 <= i < len(self.entries)]
        if bad:
            raise ValueError(f"special_ids {bad} outside vocabulary of size {len(self.entries)}")

    def is_special(self, token: int) -> bool:
        return token in self.special_ids or token == self.mask_id

    def to_json(self) -> dict:
        return {
            "entries": list(self.entries),
            "mask_id": self.mask_id,
            "special_ids": sorted(self.special_ids),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Vocab":
        return cls(
            entries=tuple(obj["entries"]),
            mask_id=int(obj["mask_id"]),
            special_ids=frozenset(int(i) for i in obj["special_ids"]),
        )


@dataclass(frozen=True)
class TraceHeader:
    format_version: int
    model_name: str
    task: str
    max_steps_per_block: int
    block_length: int
    num_blocks: int
    vocab: Vocab

    def to_json(self) -> dict:
        return {
            "format_version": self.format_version,
            "model_name": self.model_name,
            "task": self.task,
            "max_steps_per_block": self.max_steps_per_block,
            "block_length": self.block_length,
            "num_blocks": self.num_blocks,
            "vocab": self.vocab.to_json(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "TraceHeader":
        return cls(
            format_version=int(obj["format_version"]),
            model_name=str(obj["model_name"]),
            task=str(obj["task"]),
            max_steps_per_block=int(obj["max_steps_per_block"]),
            block_length=int(obj["block_length"]),
            num_blocks=int(obj["num_blocks"]),
            vocab=Vocab.from_json(obj["vocab"]),
        )


@dataclass(frozen=True)
class PositionObs:
    """One per-step, per-position observation of the denoiser's prediction."""

    position: int
    argmax_token: int
    argmax_logprob: float
    entropy: float
    was_masked: bool
    committed_now: bool
    remasked_now: bool

    def to_json(self) -> dict:
        return {
            "position": self.position,
            "argmax_token": self.argmax_token,
            "argmax_logprob": self.argmax_logprob,
            "entropy": self.entropy,
            "was_masked": self.was_masked,
            "committed_now": self.committed_now,
            "remasked_now": self.remasked_now,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PositionObs":
        return cls(
            position=int(obj["position"]),
            argmax_token=int(obj["argmax_token"]),
            argmax_logprob=float(obj["argmax_logprob"]),
            entropy=float(obj["entropy"]),
            was_masked=bool(obj["was_masked"]),
            committed_now=bool(obj["committed_now"]),
            remasked_now=bool(obj["remasked_now"]),
        )


@dataclass(frozen=True)
class StepRecord:
    block: int
    step: int  # 1-based within the block
    positions: tuple[PositionObs, ...]

    def to_json(self) -> dict:
        return {
            "block": self.block,
            "step": self.step,
            "positions": [p.to_json() for p in self.positions],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "StepRecord":
        return cls(
            block=int(obj["block"]),
            step=int(obj["step"]),
            positions=tuple(PositionObs.from_json(p) for p in obj["positions"]),
        )


@dataclass(frozen=True)
class MCMaskSample:
    """One masked-subset likelihood draw over the final output."""

    sample_index: int
    l: int
    masked_positions: frozenset[int]
    sum_logprob: float

    def to_json(self) -> dict:
        return {
            "sample_index": self.sample_index,
            "l": self.l,
            "masked_positions": sorted(self.masked_positions),
            "sum_logprob": self.sum_logprob,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "MCMaskSample":
        return cls(
            sample_index=int(obj["sample_index"]),
            l=int(obj["l"]),
            masked_positions=frozenset(int(i) for i in obj["masked_positions"]),
            sum_logprob=float(obj["sum_logprob"]),
        )


@dataclass(frozen=True)
class InstanceTrace:
    """The complete recorded denoising trajectory of one generation.

    Immutable after construction; all operations on traces are pure, so any
    number of threads may read one trace concurrently.
    """

    instance_id: str
    header_ref: TraceHeader
    final_tokens: tuple[tuple[int, ...], ...]
    steps: tuple[StepRecord, ...]
    steps_per_block: tuple[int, ...]
    nfe: int
    mc_samples: tuple[MCMaskSample, ...] = ()
    precomputed_similarity: dict[tuple[str, int, int], float] | None = field(default=None)

    # -- derived views ----------------------------------------------------

    def block_length(self, b: int) -> int:
        return len(self.final_tokens[b])

    @property
    def num_blocks(self) -> int:
        return len(self.final_tokens)

    def valid_blocks(self) -> list[int]:
        """Blocks whose final tokens contain at least one non-special token."""
        vocab = self.header_ref.vocab
        return [
            b
            for b, toks in enumerate(self.final_tokens)
            if any(not vocab.is_special(t) for t in toks)
        ]

    @property
    def b_valid(self) -> int:
        return len(self.valid_blocks())

    def output_length(self) -> int:
        """Number of non-special tokens in the final output."""
        vocab = self.header_ref.vocab
        return sum(1 for toks in self.final_tokens for t in toks if not vocab.is_special(t))

    def block_steps(self, b: int) -> list[StepRecord]:
        return [s for s in self.steps if s.block == b]

    def to_json(self) -> dict:
        obj = {
            "instance_id": self.instance_id,
            "final_tokens": [list(toks) for toks in self.final_tokens],
            "steps": [s.to_json() for s in self.steps],
            "steps_per_block": list(self.steps_per_block),
            "nfe": self.nfe,
            "mc_samples": [m.to_json() for m in self.mc_samples],
        }
        if self.precomputed_similarity is not None:
            obj["precomputed_similarity"] = {
                f"{view}:{block}:{step}": sim
                for (view, block, step), sim in sorted(self.precomputed_similarity.items())
            }
        return obj

    @classmethod
    def from_json(cls, obj: dict, header: TraceHeader) -> "InstanceTrace":
        precomputed = None
        if "precomputed_similarity" in obj and obj["precomputed_similarity"] is not None:
            precomputed = {}
            for key, sim in obj["precomputed_similarity"].items():
                view, block, step = key.rsplit(":", 2)
                precomputed[(view, int(block), int(step))] = float(sim)
        return cls(
            instance_id=str(obj["instance_id"]),
            header_ref=header,
            final_tokens=tuple(tuple(int(t) for t in toks) for toks in obj["final_tokens"]),
            steps=tuple(StepRecord.from_json(s) for s in obj["steps"]),
            steps_per_block=tuple(int(t) for t in obj["steps_per_block"]),
            nfe=int(obj["nfe"]),
            mc_samples=tuple(MCMaskSample.from_json(m) for m in obj["mc_samples"]),
            precomputed_similarity=precomputed,
        )


# -- validation -----------------------------------------------------------


@dataclass(frozen=True)
class Violation:
    invariant: str
    location: str
    detail: str

    def __str__(self) -> str:
        return f"[{self.invariant}] {self.location}: {self.detail}"


def validate(trace: InstanceTrace) -> list[Violation]:
    """Check every trace invariant; returns an empty list iff all hold.

    Violations are data, not errors: a trace that fails validation is still
    a readable object, it just must not be scored or written.
    """
    out: list[Violation] = []

    def bad(invariant: str, location: str, detail: str) -> None:
        out.append(Violation(invariant, location, detail))

    header = trace.header_ref
    vocab = header.vocab
    nv = len(vocab.entries)

    if header.format_version != FORMAT_VERSION:
        bad("format_version", "header", f"{header.format_version} != {FORMAT_VERSION}")

    if len(trace.final_tokens) != header.num_blocks:
        bad(
            "num_blocks",
            "final_tokens",
            f"{len(trace.final_tokens)} blocks, header says {header.num_blocks}",
        )

    for b, toks in enumerate(trace.final_tokens):
        for k, t in enumerate(toks):
            if not 0 <= t < nv:
                bad("token_range", f"final_tokens[{b}][{k}]", f"token {t} outside vocab")

    # Step bookkeeping per block.
    per_block_steps: dict[int, list[StepRecord]] = {}
    for rec in trace.steps:
        per_block_steps.setdefault(rec.block, []).append(rec)
        if not 0 <= rec.block < len(trace.final_tokens):
            bad("block_range", f"step (b={rec.block}, t={rec.step})", "block index out of range")

    if len(trace.steps_per_block) != len(trace.final_tokens):
        bad(
            "steps_per_block",
            "steps_per_block",
            f"{len(trace.steps_per_block)} entries for {len(trace.final_tokens)} blocks",
        )
    else:
        for b, expect in enumerate(trace.steps_per_block):
            recs = per_block_steps.get(b, [])
            if len(recs) != expect:
                bad(
                    "steps_per_block",
                    f"block {b}",
                    f"{len(recs)} step records, steps_per_block says {expect}",
                )
            got = [r.step for r in recs]
            if got != list(range(1, len(recs) + 1)):
                bad("step_order", f"block {b}", f"step indices {got} not 1..{len(recs)}")
            if expect > header.max_steps_per_block:
                bad(
                    "max_steps_per_block",
                    f"block {b}",
                    f"{expect} > header bound {header.max_steps_per_block}",
                )

    if trace.nfe != sum(trace.steps_per_block):
        bad("nfe", "nfe", f"nfe {trace.nfe} != sum of per-block steps {sum(trace.steps_per_block)}")

    # Per-observation invariants and commit consistency.
    commits: dict[tuple[int, int], list[StepRecord]] = {}
    for rec in trace.steps:
        if rec.block >= len(trace.final_tokens):
            continue
        lb = trace.block_length(rec.block)
        where = f"step (b={rec.block}, t={rec.step})"
        if [p.position for p in rec.positions] != list(range(lb)):
            bad("positions_cover_block", where, f"expected positions 0..{lb - 1} in order")
        for p in rec.positions:
            loc = f"{where} k={p.position}"
            if not (p.argmax_logprob <= 0.0) or not math.isfinite(p.argmax_logprob):
                bad("logprob_nonpositive", loc, f"argmax_logprob {p.argmax_logprob}")
            if not (p.entropy >= 0.0) or not math.isfinite(p.entropy):
                bad("entropy_nonnegative", loc, f"entropy {p.entropy}")
            if p.committed_now and not p.was_masked:
                bad("commit_from_masked", loc, "committed_now without was_masked")
            if p.committed_now and p.remasked_now:
                bad("commit_xor_remask", loc, "committed_now and remasked_now both set")
            if not 0 <= p.argmax_token < nv:
                bad("token_range", loc, f"argmax_token {p.argmax_token} outside vocab")
            if p.committed_now:
                commits.setdefault((rec.block, p.position), []).append(rec)

    for b, toks in enumerate(trace.final_tokens):
        if b in per_block_steps:
            for k, final in enumerate(toks):
                recs = commits.get((b, k), [])
                loc = f"position (b={b}, k={k})"
                if len(recs) != 1:
                    bad("single_commit", loc, f"{len(recs)} commit events, expected exactly 1")
                    continue
                obs = recs[0].positions[k]
                if obs.argmax_token != final:
                    bad(
                        "commit_matches_final",
                        loc,
                        f"committed token {obs.argmax_token} != final token {final}",
                    )

    # MC sample invariants.
    out_len = trace.output_length()
    for m in trace.mc_samples:
        loc = f"mc_sample {m.sample_index}"
        if len(m.masked_positions) != m.l:
            bad("mc_sample_size", loc, f"|masked_positions| {len(m.masked_positions)} != l {m.l}")
        if not 1 <= m.l <= max(out_len, 1):
            bad("mc_sample_l_range", loc, f"l {m.l} outside 1..{out_len}")
        if not (m.sum_logprob <= 0.0) or not math.isfinite(m.sum_logprob):
            bad("mc_sample_logprob", loc, f"sum_logprob {m.sum_logprob}")

    if trace.precomputed_similarity is not None:
        for (view, block, step), sim in trace.precomputed_similarity.items():
            loc = f"precomputed ({view}, {block}, {step})"
            if view not in VIEWS:
                bad("precomputed_view", loc, f"unknown view {view!r}")
            if not 0.0 <= sim <= 1.0:
                bad("similarity_range", loc, f"similarity {sim} outside [0, 1]")

    return out


# -- trajectory views -----------------------------------------------------


def _block_state(trace: InstanceTrace, b: int, step: int) -> list[int]:
    """Block ``b`` rendered at its own local ``step`` (0 = all masked)."""
    lb = trace.block_length(b)
    mask_id = trace.header_ref.vocab.mask_id
    if step == 0:
        return [mask_id] * lb
    t_b = trace.steps_per_block[b]
    if step >= t_b:
        return list(trace.final_tokens[b])
    rec = next(r for r in trace.steps if r.block == b and r.step == step)
    return [p.argmax_token for p in rec.positions]


def intermediate_sequence(trace: InstanceTrace, view: str, step: int) -> list[int]:
    """Reconstruct the argmax-decoded intermediate state under a trajectory view.

    ``block:<b>`` renders block ``b`` alone at its local step; ``last``
    renders only the last valid block; ``last_prefix`` renders all blocks up
    to the last valid one, with the prefix frozen at its final state; ``full``
    renders every block under the global step ordering (exhausted blocks at
    final state, unstarted blocks fully masked).  Step 0 is the pre-pass
    state; the final step of every view equals that view's final output.
    """
    mask_id = trace.header_ref.vocab.mask_id

    if view.startswith("block:"):
        b = int(view.split(":", 1)[1])
        if not 0 <= b < trace.num_blocks:
            raise ValueError(f"block {b} out of range")
        if not 0 <= step <= trace.steps_per_block[b]:
            raise ValueError(f"step {step} out of range for block {b}")
        return _block_state(trace, b, step)

    valid = trace.valid_blocks()

    if view in ("last", "last_prefix"):
        if not valid:
            raise ValueError("trace has no valid blocks")
        last = valid[-1]
        if not 0 <= step <= trace.steps_per_block[last]:
            raise ValueError(f"step {step} out of range for last block {last}")
        state = _block_state(trace, last, step)
        if view == "last":
            return state
        prefix: list[int] = []
        for b in range(last):
            prefix.extend(trace.final_tokens[b])
        return prefix + state

    if view == "full":
        total = sum(trace.steps_per_block)
        if not 0 <= step <= total:
            raise ValueError(f"step {step} out of range for full view (0..{total})")
        out: list[int] = []
        remaining = step
        for b in range(trace.num_blocks):
            t_b = trace.steps_per_block[b]
            local = min(remaining, t_b)
            if local >= t_b:
                out.extend(trace.final_tokens[b])
            elif local == 0:
                out.extend([mask_id] * trace.block_length(b))
            else:
                out.extend(_block_state(trace, b, local))
            remaining -= local
        return out

    raise ValueError(f"unknown view {view!r}; expected one of {VIEWS} or 'block:<b>'")


def detokenize(tokens: Iterable[int], vocab: Vocab, render_masks: str = "sentinel") -> str:
    """Deterministic text rendering: concatenated surfaces of non-special tokens.

    Mask tokens render as a fixed sentinel string by default, or are dropped
    with ``render_masks='strip'``.
    """
    parts: list[str] = []
    for t in tokens:
        if t == vocab.mask_id:
            if render_masks == "sentinel":
                parts.append(MASK_SENTINEL)
            elif render_masks != "strip":
                raise ValueError(f"render_masks must be 'sentinel' or 'strip', got {render_masks!r}")
        elif t not in vocab.special_ids:
            parts.append(vocab.entries[t])
    return "".join(parts)


# -- streaming I/O --------------------------------------------------------

_GZIP_MAGIC = b"\x1f\x8b"


def _open_source(source) -> IO[bytes]:
    if isinstance(source, (str, os.PathLike)):
        raw: IO[bytes] = open(source, "rb")
    else:
        raw = source
    if hasattr(raw, "peek"):
        magic = raw.peek(2)[:2]
    elif raw.seekable():
        pos = raw.tell()
        magic = raw.read(2)
        raw.seek(pos)
    else:
        # Non-seekable pipe: buffering takes ownership of the stream.
        raw = io.BufferedReader(raw)
        magic = raw.peek(2)[:2]
    if magic == _GZIP_MAGIC:
        return gzip.open(raw, "rb")  # offsets are in the decompressed stream
    return raw


def read_traces(source) -> Iterator[InstanceTrace]:
    """Lazily yield traces from a path or binary stream in file order.

    The header is parsed once before the first yield; each trace is fully
    materialized before being yielded.  Raises :class:`TraceVersionError` on
    a format-version mismatch and :class:`TraceFormatError` (carrying the
    byte offset and, when known, the instance id) on malformed records.
    """
    stream = _open_source(source)
    offset = 0
    header_line = stream.readline()
    if not header_line.strip():
        raise TraceFormatError("missing header line", offset)
    try:
        header_obj = json.loads(header_line)
    except json.JSONDecodeError as e:
        raise TraceFormatError(f"unparseable header: {e.msg}", offset) from e
    if header_obj.get("format_version") != FORMAT_VERSION:
        raise TraceVersionError(header_obj.get("format_version"))
    try:
        header = TraceHeader.from_json(header_obj)
    except (KeyError, TypeError, ValueError) as e:
        raise TraceFormatError(f"bad header field: {e}", offset) from e
    offset += len(header_line)

    def gen() -> Iterator[InstanceTrace]:
        nonlocal offset
        while True:
            line = stream.readline()
            if not line:
                return
            if not line.strip():
                offset += len(line)
                continue
            instance_id = None
            try:
                obj = json.loads(line)
                instance_id = obj.get("instance_id")
                trace = InstanceTrace.from_json(obj, header)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise TraceFormatError(f"malformed record: {e}", offset, instance_id) from e
            offset += len(line)
            yield trace

    return gen()


def write_traces(traces: Iterable[InstanceTrace], sink, header: TraceHeader | None = None) -> None:
    """Write a header line plus one record per trace to a path or binary stream.

    All traces must share one header; each trace is validated before writing
    and refused (with its violations) if invalid.  ``header`` is only needed
    when ``traces`` may be empty.
    """
    own = isinstance(sink, (str, os.PathLike))
    out: IO[bytes] = open(sink, "wb") if own else sink
    try:
        wrote_header = False
        for trace in traces:
            if header is None:
                header = trace.header_ref
            elif trace.header_ref != header:
                raise TraceError(f"instance {trace.instance_id!r} has an inconsistent header")
            if not wrote_header:
                out.write(json.dumps(header.to_json()).encode() + b"\n")
                wrote_header = True
            violations = validate(trace)
            if violations:
                raise TraceError(
                    f"refusing to write invalid trace {trace.instance_id!r}: "
                    + "; ".join(str(v) for v in violations[:5])
                )
            out.write(json.dumps(trace.to_json()).encode() + b"\n")
        if not wrote_header:
            if header is None:
                raise TraceError("cannot write an empty trace file without an explicit header")
            out.write(json.dumps(header.to_json()).encode() + b"\n")
    finally:
        if own:
            out.close()

"""The study state machine: batches, training gate, self-consistency, retries.

A batch presents 25 distinct images of a single tier twice each, in a seeded
slot order that keeps the two occurrences of any image at least 5 slots
apart. Completed batches must reach an SRCC of 0.9 between the two
repetition vectors; a failing batch is retried exactly once with a fresh
slot order, and the second attempt is accepted unconditionally but flagged.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import RatingEvent, TIER_NAMES
from .stats import srcc

BATCH_IMAGES = 25
MIN_REP_SEPARATION = 5
CONSISTENCY_SRCC = 0.9
MAX_BATCH_RETRIES = 1

ACCEPT = "accept"
REQUIRE_RETRY = "require_retry"
ACCEPT_AFTER_RETRY = "accept_after_retry"

PHASE_DEVICE_CHECK = "device_check"
PHASE_TRAINING = "training"
PHASE_MAIN = "main"
PHASE_DONE = "done"


@dataclass(frozen=True)
class TrainingItem:
    image_id: str
    tier: str
    lo: float
    hi: float

    def __post_init__(self):
        if not (1.0 <= self.lo < self.hi <= 100.0):
            raise ValueError(f"training range [{self.lo}, {self.hi}] invalid")


def load_training_items(path: str | Path) -> list[TrainingItem]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != "image_id,tier,lo,hi":
        raise ValueError("training items file must start with 'image_id,tier,lo,hi'")
    items = []
    for i, line in enumerate(lines[1:], start=1):
        if not line:
            continue
        cells = line.split(",")
        if len(cells) != 4:
            raise ValueError(f"training row {i}: expected 4 fields")
        items.append(TrainingItem(cells[0], cells[1], float(cells[2]), float(cells[3])))
    return items


def save_training_items(items: list[TrainingItem], path: str | Path) -> None:
    lines = ["image_id,tier,lo,hi"]
    lines += [f"{t.image_id},{t.tier},{t.lo!r},{t.hi!r}" for t in items]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


@dataclass
class Batch:
    batch_id: str
    tier: str
    image_ids: list[str]
    slots: list[tuple[str, int]]  # (image_id, repetition)
    seed: int

    def validate(self) -> None:
        n = len(self.image_ids)
        if len(set(self.image_ids)) != n:
            raise ValueError(f"batch {self.batch_id}: duplicate images")
        if len(self.slots) != 2 * n:
            raise ValueError(f"batch {self.batch_id}: expected {2 * n} slots")
        first: dict[str, int] = {}
        min_sep = min(MIN_REP_SEPARATION, n)
        for pos, (img, rep) in enumerate(self.slots):
            if img not in self.image_ids:
                raise ValueError(f"batch {self.batch_id}: foreign image {img!r}")
            if img in first:
                if rep != 2:
                    raise ValueError(f"batch {self.batch_id}: bad repetition order")
                if pos - first[img] < min_sep:
                    raise ValueError(
                        f"batch {self.batch_id}: repetitions of {img!r} only "
                        f"{pos - first[img]} slots apart")
            else:
                if rep != 1:
                    raise ValueError(f"batch {self.batch_id}: bad repetition order")
                first[img] = pos


def _slot_order(image_ids: list[str], rng: np.random.Generator) -> list[tuple[str, int]]:
    """Seeded permutation of two occurrences per image, repetitions >= 5
    slots apart (>= n for tiny batches). Rejection-sampled; falls back to a
    shuffled round-robin (separation exactly n), which always satisfies the
    constraint for n >= 5."""
    n = len(image_ids)
    min_sep = min(MIN_REP_SEPARATION, n)
    doubled = list(image_ids) * 2
    for _ in range(10_000):
        perm = [doubled[i] for i in rng.permutation(len(doubled))]
        first: dict[str, int] = {}
        ok = True
        for pos, img in enumerate(perm):
            if img in first and pos - first[img] < min_sep:
                ok = False
                break
            first.setdefault(img, pos)
        if ok:
            break
    else:
        shuffled = [image_ids[i] for i in rng.permutation(n)]
        perm = shuffled + shuffled
    seen: set[str] = set()
    slots = []
    for img in perm:
        slots.append((img, 2 if img in seen else 1))
        seen.add(img)
    return slots


def generate_batches(image_ids: list[str], tiers: list[str], seed: int,
                     strict: bool = False) -> list[Batch]:
    """Partition images into per-tier batches of 25 and order them for one
    session. With strict=True an image count not divisible by 25 is an
    error; otherwise the final batch of a tier is smaller."""
    if len(set(image_ids)) != len(image_ids):
        raise ValueError("duplicate image ids")
    for t in tiers:
        if t not in TIER_NAMES:
            raise ValueError(f"unknown tier {t!r}")
    if strict and len(image_ids) % BATCH_IMAGES != 0:
        raise ValueError(
            f"{len(image_ids)} images is not divisible by {BATCH_IMAGES}")

    root = np.random.SeedSequence(seed)
    tier_streams = root.spawn(len(tiers) + 1)
    batches: list[Batch] = []
    for ti, tier in enumerate(tiers):
        rng = np.random.default_rng(tier_streams[ti])
        order = [image_ids[i] for i in rng.permutation(len(image_ids))]
        groups = [order[i:i + BATCH_IMAGES] for i in range(0, len(order), BATCH_IMAGES)]
        for gi, group in enumerate(groups):
            slot_seed = int(rng.integers(0, 2 ** 63))
            slots = _slot_order(group, np.random.default_rng(slot_seed))
            batch = Batch(batch_id=f"{tier}-{gi:03d}", tier=tier,
                          image_ids=group, slots=slots, seed=slot_seed)
            batch.validate()
            batches.append(batch)
    session_rng = np.random.default_rng(tier_streams[-1])
    return [batches[i] for i in session_rng.permutation(len(batches))]


@dataclass
class TrainingGateResult:
    passed: bool
    shown_range: tuple[float, float] | None = None


def training_gate(value: float, item: TrainingItem) -> TrainingGateResult:
    """Pass iff the rating falls in the item's acceptable range (inclusive);
    otherwise the range is returned for display and the item is re-queued."""
    if item.lo <= value <= item.hi:
        return TrainingGateResult(passed=True)
    return TrainingGateResult(passed=False, shown_range=(item.lo, item.hi))


def consistency_gate(batch_events: list[RatingEvent], retry_count: int) -> str:
    """Self-consistency decision for a completed batch.

    SRCC is computed between the repetition-1 and repetition-2 vectors over
    the batch's images. An undefined SRCC (constant vector) counts as a
    failure. At most one retry; the second attempt is accepted regardless.
    """
    reps: dict[str, dict[int, float]] = {}
    for ev in batch_events:
        reps.setdefault(ev.image_id, {})[ev.repetition] = ev.value
    if not reps or any(set(r) != {1, 2} for r in reps.values()):
        raise ValueError("incomplete batch: every image needs repetitions 1 and 2")
    images = sorted(reps)
    r1 = [reps[img][1] for img in images]
    r2 = [reps[img][2] for img in images]
    try:
        rho = srcc(r1, r2)
    except ValueError:
        rho = float("-inf")  # flat-line response: no consistency evidence
    if rho >= CONSISTENCY_SRCC:
        return ACCEPT
    return REQUIRE_RETRY if retry_count < MAX_BATCH_RETRIES else ACCEPT_AFTER_RETRY


@dataclass
class ProtocolDecision:
    kind: str  # "next_slot" | "training_retry" | "batch_retry" | "done"
    acceptable_range: tuple[float, float] | None = None
    batch_accepted: bool = False
    low_consistency: bool = False


@dataclass
class Slot:
    phase: str
    image_id: str
    tier: str
    batch_id: str | None = None
    repetition: int | None = None
    index: int | None = None


@dataclass
class StudySession:
    """One participant's pass through the study.

    Single-writer: the owning participant drives it through submit_rating().
    Completed ratings are immutable; there is no accessor that returns a
    previously submitted value.
    """
    participant_id: str
    training_items: list[TrainingItem]
    batches: list[Batch]
    phase: str = PHASE_DEVICE_CHECK
    _training_pos: int = 0
    _batch_pos: int = 0
    _slot_pos: int = 0
    _attempt_events: list[RatingEvent] = field(default_factory=list)
    retry_counts: dict[str, int] = field(default_factory=dict)
    low_consistency_batches: list[str] = field(default_factory=list)
    accepted_events: list[RatingEvent] = field(default_factory=list)
    training_retries: int = 0
    _newly_accepted: list[RatingEvent] = field(default_factory=list)

    def mark_device_checked(self) -> None:
        if self.phase != PHASE_DEVICE_CHECK:
            raise ValueError(f"device check not pending in phase {self.phase}")
        self.phase = PHASE_TRAINING if self.training_items else PHASE_MAIN
        self._check_done()

    def _check_done(self) -> None:
        if self.phase == PHASE_MAIN and self._batch_pos >= len(self.batches):
            self.phase = PHASE_DONE

    def current_slot(self) -> Slot | None:
        if self.phase == PHASE_TRAINING:
            item = self.training_items[self._training_pos]
            return Slot(phase=PHASE_TRAINING, image_id=item.image_id, tier=item.tier)
        if self.phase == PHASE_MAIN:
            batch = self.batches[self._batch_pos]
            img, rep = batch.slots[self._slot_pos]
            return Slot(phase=PHASE_MAIN, image_id=img, tier=batch.tier,
                        batch_id=batch.batch_id, repetition=rep, index=self._slot_pos)
        return None

    def pop_newly_accepted(self) -> list[RatingEvent]:
        """Events accepted by the most recent gate decision, handed out once."""
        out, self._newly_accepted = self._newly_accepted, []
        return out

    def submit_rating(self, event: RatingEvent) -> ProtocolDecision:
        if self.phase == PHASE_DEVICE_CHECK:
            raise ValueError("device check pending; no ratings accepted")
        if self.phase == PHASE_DONE:
            raise ValueError("session is complete")
        event.validate()
        slot = self.current_slot()
        if event.image_id != slot.image_id or event.tier != slot.tier:
            raise ValueError(
                f"event targets ({event.image_id!r}, {event.tier}) but the "
                f"current slot is ({slot.image_id!r}, {slot.tier})")

        if self.phase == PHASE_TRAINING:
            item = self.training_items[self._training_pos]
            result = training_gate(event.value, item)
            if not result.passed:
                self.training_retries += 1
                return ProtocolDecision(kind="training_retry",
                                        acceptable_range=result.shown_range)
            self._training_pos += 1
            if self._training_pos >= len(self.training_items):
                self.phase = PHASE_MAIN
                self._check_done()
            return ProtocolDecision(kind="done" if self.phase == PHASE_DONE else "next_slot")

        batch = self.batches[self._batch_pos]
        if event.batch_id != batch.batch_id or event.repetition != slot.repetition:
            raise ValueError(
                f"event batch/repetition ({event.batch_id!r}, {event.repetition}) "
                f"does not match slot ({batch.batch_id!r}, {slot.repetition})")
        self._attempt_events.append(event)
        self._slot_pos += 1
        if self._slot_pos < len(batch.slots):
            return ProtocolDecision(kind="next_slot")

        # batch complete: run the self-consistency gate
        retry_count = self.retry_counts.get(batch.batch_id, 0)
        decision = consistency_gate(self._attempt_events, retry_count)
        if decision == REQUIRE_RETRY:
            self.retry_counts[batch.batch_id] = retry_count + 1
            reseed = np.random.default_rng(np.random.SeedSequence([batch.seed, retry_count + 1]))
            batch.slots = _slot_order(batch.image_ids, reseed)
            self._attempt_events = []
            self._slot_pos = 0
            return ProtocolDecision(kind="batch_retry")
        low = decision == ACCEPT_AFTER_RETRY
        if low:
            self.low_consistency_batches.append(batch.batch_id)
        self.accepted_events.extend(self._attempt_events)
        self._newly_accepted = list(self._attempt_events)
        self._attempt_events = []
        self._slot_pos = 0
        self._batch_pos += 1
        self._check_done()
        return ProtocolDecision(
            kind="done" if self.phase == PHASE_DONE else "next_slot",
            batch_accepted=True, low_consistency=low)

    def progress(self) -> dict:
        """Read-only snapshot; never includes rating values."""
        return {
            "phase": self.phase,
            "batches_done": self._batch_pos,
            "batches_total": len(self.batches),
            "batch_retries": sum(self.retry_counts.values()),
            "training_remaining": max(len(self.training_items) - self._training_pos, 0)
            if self.phase in (PHASE_DEVICE_CHECK, PHASE_TRAINING) else 0,
            "training_retries": self.training_retries,
        }


def simulate_participant(participant_id: str, image_ids: list[str], tiers: list[str],
                         seed: int, training_items: list[TrainingItem] | None = None,
                         rating_noise: float = 0.0) -> StudySession:
    """Drive one headless participant through a full session.

    The simulated rater scores each (image, tier) from a seeded latent value,
    optionally jittered per repetition, so batches normally pass the
    consistency gate. Returns the finished session.
    """
    session = StudySession(participant_id=participant_id,
                           training_items=list(training_items or []),
                           batches=generate_batches(image_ids, tiers, seed=seed))
    session.mark_device_checked()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x51]))
    latent = {(img, t): float(rng.uniform(5.0, 95.0))
              for img in image_ids for t in tiers}
    now = 1_700_000_000_000
    while session.phase != PHASE_DONE:
        slot = session.current_slot()
        if slot.phase == PHASE_TRAINING:
            item = session.training_items[session._training_pos]
            value = (item.lo + item.hi) / 2.0
            event = RatingEvent(participant_id=participant_id, image_id=slot.image_id,
                                tier=slot.tier, batch_id="training", repetition=1,
                                value=value, submitted_at=now)
            session.submit_rating(event)
            continue
        value = latent[(slot.image_id, slot.tier)]
        if rating_noise > 0.0:
            value += float(rng.normal(0.0, rating_noise))
        value = float(np.clip(value, 1.0, 100.0))
        event = RatingEvent(participant_id=participant_id, image_id=slot.image_id,
                            tier=slot.tier, batch_id=slot.batch_id,
                            repetition=slot.repetition, value=value, submitted_at=now)
        session.submit_rating(event)
        now += 1000
    return session

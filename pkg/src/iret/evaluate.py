"""Exact retrieval evaluation under the Oxford/Paris protocol."""

from dataclasses import dataclass, field

from .errors import GroundTruthError


@dataclass(frozen=True)
class GroundTruth:
    query_id: str
    positives: frozenset
    junk: frozenset = frozenset()
    bbox: tuple = None
    query_image: str = None

    def __post_init__(self):
        if not self.positives:
            raise GroundTruthError("no positives for query %r" % self.query_id)
        if self.positives & self.junk:
            raise GroundTruthError("overlapping sets for query %r" % self.query_id)
        if self.bbox is not None:
            x1, y1, x2, y2 = self.bbox
            if not (x1 < x2 and y1 < y2):
                raise GroundTruthError("degenerate bbox %r for query %r" % (self.bbox, self.query_id))


@dataclass
class RankedList:
    query_id: str
    entries: list = field(default_factory=list)  # (image_id, score), best first

    @property
    def ids(self):
        return [image_id for image_id, _ in self.entries]


def exact_ap(ranked, gt):
    """Rectangle-rule AP after dropping junk; missing positives still count in recall."""
    if not gt.positives:
        raise GroundTruthError("no positives for query %r" % gt.query_id)
    ids = ranked.ids if isinstance(ranked, RankedList) else list(ranked)
    n_pos = len(gt.positives)
    hits = 0
    rank = 0
    ap = 0.0
    for image_id in ids:
        if image_id in gt.junk:
            continue
        rank += 1
        if image_id in gt.positives:
            hits += 1
            ap += hits / rank
    return ap / n_pos


def mean_ap(pairs):
    pairs = list(pairs)
    if not pairs:
        raise ValueError("mean_ap needs at least one query")
    return sum(exact_ap(r, gt) for r, gt in pairs) / len(pairs)


def format_report(pairs):
    """Evaluation report: one ``query_id<TAB>ap`` line per query, then ``mAP``."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("report needs at least one query")
    aps = [exact_ap(r, gt) for r, gt in pairs]
    lines = ["%s\t%.6f" % (gt.query_id, ap) for (_, gt), ap in zip(pairs, aps)]
    lines.append("mAP\t%.6f" % (sum(aps) / len(aps)))
    return "\n".join(lines) + "\n"

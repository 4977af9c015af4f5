"""Retrieval/annotation metrics and the cross-corpus transfer protocol.

Tag retrieval AUC ranks all test tracks by cosine to a tag's point and
scores how well ground-truth members outrank non-members; the aggregate is
the unweighted (macro) mean over tags, with a global pooled variant behind a
flag. Genre accuracy is top-1 nearest label. Transfer evaluation feeds a
foreign corpus's test tracks to a trained model with no adaptation and
records that no target-corpus supervision was used.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .infer import LabelIndex, build_label_index, embed_tracks, nearest_labels
from .training import ModelCheckpoint, checkpoint_digest
from .wordspace import ResolutionPolicy, STRICT_POLICY, WordVectorTable, normalize_tag


class SingleClassError(ValueError):
    """Raised when AUC is requested for all-positive or all-negative labels."""


@dataclass
class EvalReport:
    """Per-tag metric values plus provenance for one evaluation run."""

    protocol: str
    per_tag: list[tuple[str, float, int]]  # (tag, value, positive count)
    aggregate: float
    kept_tags: list[str]
    dropped_tags: list[str]
    skipped_tags: list[tuple[str, str]]  # (tag, reason)
    checkpoint_id: str
    n_tracks: int
    notes: list[str] = field(default_factory=list)
    zero_target_supervision: bool = False
    self_evaluation: bool = False

    def to_records(self) -> str:
        """Structured text records: kind TAB key TAB value TAB extra."""
        lines = ["# kind\tkey\tvalue\textra"]
        lines.append(f"meta\tprotocol\t{self.protocol}\t")
        lines.append(f"meta\tcheckpoint\t{self.checkpoint_id}\t")
        lines.append(f"meta\tn_tracks\t{self.n_tracks}\t")
        lines.append(f"meta\tzero_target_supervision\t{str(self.zero_target_supervision).lower()}\t")
        lines.append(f"meta\tself_evaluation\t{str(self.self_evaluation).lower()}\t")
        for note in self.notes:
            lines.append(f"note\t\t{note}\t")
        for tag, value, positives in self.per_tag:
            lines.append(f"tag\t{tag}\t{value:.10f}\t{positives}")
        for tag in self.dropped_tags:
            lines.append(f"dropped\t{tag}\t\t")
        for tag, reason in self.skipped_tags:
            lines.append(f"skipped\t{tag}\t{reason}\t")
        lines.append(f"aggregate\t{self.protocol}\t{self.aggregate:.10f}\t{len(self.per_tag)}")
        return "\n".join(lines) + "\n"

    def format_table(self) -> str:
        width = max([len("tag")] + [len(t) for t, _, _ in self.per_tag])
        lines = [f"protocol: {self.protocol}   checkpoint: {self.checkpoint_id}   tracks: {self.n_tracks}"]
        if self.zero_target_supervision:
            lines.append("transfer protocol: no target-corpus supervision used"
                         + ("  [WARNING: evaluating on the training corpus]" if self.self_evaluation else ""))
        lines.append(f"{'tag'.ljust(width)}  {'value':>10}  {'positives':>9}")
        for tag, value, positives in self.per_tag:
            lines.append(f"{tag.ljust(width)}  {value:10.4f}  {positives:9d}")
        for tag, reason in self.skipped_tags:
            lines.append(f"{tag.ljust(width)}  {'skipped':>10}  ({reason})")
        if self.dropped_tags:
            lines.append(f"dropped (unresolvable): {', '.join(self.dropped_tags)}")
        lines.append(f"{'AGGREGATE'.ljust(width)}  {self.aggregate:10.4f}  over {len(self.per_tag)} tags")
        return "\n".join(lines)


def roc_auc(scores, labels) -> float:
    """P(random positive outranks random negative), ties counted 0.5.

    Rank-sum (Mann-Whitney) formulation with midranks; numerators are exact
    in double precision, so the result equals the brute-force pairwise count
    bit for bit.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError(f"scores and labels must be equal-length vectors, got {scores.shape}/{labels.shape}")
    positive = labels.astype(bool)
    n_pos = int(positive.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClassError(f"AUC undefined: {n_pos} positives, {n_neg} negatives")
    ranks = rankdata(scores, method="average")
    rank_sum = float(ranks[positive].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def _prepare(checkpoint, records, candidate_tags, table, policy, base_dir, threads):
    index = build_label_index(checkpoint, candidate_tags, table, policy)
    embedded = embed_tracks(checkpoint, records, base_dir=base_dir, threads=threads)
    matrix = np.stack([emb for _, emb in embedded])
    return index, embedded, matrix


def tag_retrieval_auc(
    checkpoint: ModelCheckpoint,
    records,
    candidate_tags: list[str],
    table: WordVectorTable,
    policy: ResolutionPolicy = STRICT_POLICY,
    variant: str = "macro",
    base_dir: str | None = None,
    threads: int = 1,
) -> EvalReport:
    """Per-tag retrieval AUC over test tracks, macro-averaged.

    ``variant="global"`` pools all (track, tag) pairs into one AUC instead;
    the macro/global choice is recorded in the report notes. Tags with no
    positives (or no negatives) in the split are skipped and listed.
    """
    if variant not in ("macro", "global"):
        raise ValueError(f"unknown AUC variant {variant!r}")
    records = list(records)
    if not records:
        raise ValueError("empty test split")
    index, embedded, matrix = _prepare(checkpoint, records, candidate_tags, table, policy, base_dir, threads)
    scores = matrix @ index.points.T  # (tracks, tags)
    membership = np.zeros_like(scores, dtype=bool)
    for i, record in enumerate(records):
        track_tags = {normalize_tag(t) for t in record.tags}
        for j, tag in enumerate(index.tags):
            membership[i, j] = normalize_tag(tag) in track_tags

    per_tag: list[tuple[str, float, int]] = []
    skipped: list[tuple[str, str]] = []
    for j, tag in enumerate(index.tags):
        try:
            value = roc_auc(scores[:, j], membership[:, j])
        except SingleClassError:
            n_pos = int(membership[:, j].sum())
            reason = "no positives in split" if n_pos == 0 else "no negatives in split"
            skipped.append((tag, reason))
            continue
        per_tag.append((tag, value, int(membership[:, j].sum())))
    if not per_tag:
        raise ValueError("every candidate tag was single-class in this split; AUC undefined")

    if variant == "macro":
        aggregate = float(np.mean([v for _, v, _ in per_tag]))
    else:
        usable = [j for j, tag in enumerate(index.tags) if tag in {t for t, _, _ in per_tag}]
        aggregate = roc_auc(scores[:, usable].ravel(), membership[:, usable].ravel())
    notes = [f"auc_variant={variant}", "aggregate is the unweighted mean over tags" if variant == "macro"
             else "aggregate pools all (track, tag) pairs"]
    return EvalReport(
        protocol="tag_retrieval_auc",
        per_tag=per_tag,
        aggregate=aggregate,
        kept_tags=list(index.tags),
        dropped_tags=list(index.dropped),
        skipped_tags=skipped,
        checkpoint_id=checkpoint_digest(checkpoint),
        n_tracks=len(records),
        notes=notes,
    )


def genre_accuracy(
    checkpoint: ModelCheckpoint,
    records,
    genre_candidates: list[str],
    table: WordVectorTable,
    policy: ResolutionPolicy = STRICT_POLICY,
    base_dir: str | None = None,
    threads: int = 1,
) -> EvalReport:
    """Top-1 genre annotation accuracy; every track needs one true genre."""
    records = list(records)
    if not records:
        raise ValueError("empty test split")
    index, embedded, matrix = _prepare(checkpoint, records, candidate_tags=genre_candidates,
                                       table=table, policy=policy, base_dir=base_dir, threads=threads)
    kept_norm = {normalize_tag(t): t for t in index.tags}
    truths = []
    for record in records:
        in_candidates = [kept_norm[normalize_tag(t)] for t in record.tags if normalize_tag(t) in kept_norm]
        if len(in_candidates) != 1:
            raise ValueError(
                f"track {record.track_id!r} must have exactly one ground-truth genre among candidates, "
                f"found {len(in_candidates)}"
            )
        truths.append(in_candidates[0])

    correct_by_tag: dict[str, list[int]] = {tag: [] for tag in index.tags}
    n_correct = 0
    for i, truth in enumerate(truths):
        top_tag, _ = nearest_labels(matrix[i], index, k=1)[0]
        hit = int(top_tag == truth)
        n_correct += hit
        correct_by_tag[truth].append(hit)
    per_tag = [(tag, float(np.mean(hits)), len(hits)) for tag, hits in correct_by_tag.items() if hits]
    return EvalReport(
        protocol="genre_accuracy",
        per_tag=per_tag,
        aggregate=n_correct / len(records),
        kept_tags=list(index.tags),
        dropped_tags=list(index.dropped),
        skipped_tags=[],
        checkpoint_id=checkpoint_digest(checkpoint),
        n_tracks=len(records),
        notes=["aggregate is the fraction of tracks whose top-1 label is correct"],
    )


def transfer_evaluate(
    checkpoint: ModelCheckpoint,
    target_name: str,
    records,
    candidate_tags: list[str],
    protocol: str,
    table: WordVectorTable,
    policy: ResolutionPolicy = STRICT_POLICY,
    base_dir: str | None = None,
    threads: int = 1,
    auc_variant: str = "macro",
) -> EvalReport:
    """Evaluate a trained model on a foreign corpus with no adaptation.

    The target supplies its own candidate tag set; the label index goes
    through the same word table and the trained projection. Evaluating a
    checkpoint on its own training corpus is permitted but flagged.
    """
    records = list(records)
    if not records:
        raise ValueError(f"target corpus {target_name!r} has an empty test split")
    if protocol == "auc":
        report = tag_retrieval_auc(checkpoint, records, candidate_tags, table, policy,
                                   variant=auc_variant, base_dir=base_dir, threads=threads)
    elif protocol == "accuracy":
        report = genre_accuracy(checkpoint, records, candidate_tags, table, policy,
                                base_dir=base_dir, threads=threads)
    else:
        raise ValueError(f"unknown protocol {protocol!r}; expected 'auc' or 'accuracy'")
    report.protocol = f"transfer_{report.protocol}"
    report.zero_target_supervision = True
    report.self_evaluation = bool(target_name and target_name == checkpoint.metadata.get("corpus_name"))
    report.notes.append(f"target_corpus={target_name}")
    report.notes.append(f"training_corpus={checkpoint.metadata.get('corpus_name', '')}")
    return report

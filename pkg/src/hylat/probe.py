"""Latent-space and attention probes over evaluation output."""
from __future__ import annotations

import base64
import csv
import io
import warnings
from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from .errors import InputError, IoError
from .protocol import Source

CATEGORIES = [s.value for s in Source]


def collect_final_latents(transcript, label=None):
    """Last latent vector z_k of every final-round message that has a latent block.

    Returns ``(X, labels)``.  Records must carry their latent payload.
    """
    recs = [r for r in transcript if r.get("has_latent_block")]
    if not recs:
        return np.zeros((0, 0), dtype=np.float32), []
    last = max(r["round"] for r in recs)
    rows, labels = [], []
    for r in recs:
        if r["round"] != last or r["k"] == 0:
            continue
        if "latent_b64" not in r:
            raise IoError(f"transcript record for question {r.get('question')} has no latent payload")
        v = np.frombuffer(base64.b64decode(r["latent_b64"]), dtype="<f4").reshape(r["k"], r["d_model"])
        rows.append(v[-1].astype(np.float64))
        labels.append(label if label is not None else r.get("family", ""))
    X = np.stack(rows) if rows else np.zeros((0, 0))
    return X, labels


@dataclass
class PcaResult:
    mean: np.ndarray  # (d,)
    components: np.ndarray  # (m, d), orthonormal rows
    explained_ratio: np.ndarray  # (m,)
    projections: np.ndarray  # (n, m)

    def reconstruct(self):
        return self.mean + self.projections @ self.components


def pca(X, num_components=None, rtol=1e-10):
    """Principal components of the rows of ``X`` via SVD.

    Each component is signed so its largest-magnitude coordinate is positive.
    When fewer non-degenerate components exist than requested, a warning is
    issued and only the available ones are returned.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise InputError("pca needs a 2-D array with at least two rows")
    mean = X.mean(axis=0)
    Xc = X - mean
    _, s, vt = np.linalg.svd(Xc, full_matrices=False)
    var = s**2
    total = var.sum()
    rank = int((s > rtol * max(s[0], 1e-300)).sum()) if total > 0 else 0
    m = rank if num_components is None else num_components
    if m > rank:
        warnings.warn(f"requested {m} components but data has rank {rank}", stacklevel=2)
        m = rank
    comps = vt[:m].copy()
    for i in range(m):
        j = int(np.argmax(np.abs(comps[i])))
        if comps[i, j] < 0:
            comps[i] = -comps[i]
    ratio = var[:m] / total if total > 0 else np.zeros(m)
    return PcaResult(mean, comps, ratio, Xc @ comps.T)


def cluster_separation(X, labels):
    """Minimum distance between label centroids over the mean distance of
    points to their own centroid."""
    X = np.asarray(X, dtype=np.float64)
    labels = list(labels)
    uniq = sorted(set(labels))
    if len(uniq) < 2:
        raise InputError("cluster separation needs at least two labels")
    lab = np.array([uniq.index(l) for l in labels])
    cents = np.stack([X[lab == c].mean(axis=0) for c in range(len(uniq))])
    intra = np.linalg.norm(X - cents[lab], axis=1).mean()
    diff = cents[:, None] - cents[None]
    dist = np.linalg.norm(diff, axis=-1)
    inter = dist[np.triu_indices(len(uniq), 1)].min()
    if intra == 0:
        return float("inf") if inter > 0 else 0.0
    return float(inter / intra)


def _generated_sources(trace):
    """Source tags of the items an agent generates, in feed order."""
    if not trace["latent"]:
        return [Source.OWN_TEXT.value] * (trace["text_len"] + 1)
    k = trace["k"]
    tags = [Source.TEMPLATE.value] + [Source.OWN_LATENT.value] * k + [Source.TEMPLATE.value]
    n_text = trace["text_len"]
    if n_text:
        tags += [Source.TEMPLATE.value] * 2 + [Source.OWN_TEXT.value] * (n_text - 2)
    return tags


def attention_report(traces):
    """Mean final-layer attention mass per (round, step, source category).

    Each generated item contributes one attention row (mean over heads); the
    row's mass is summed by the category of each attended position, then
    averaged over agents and questions.  Returns sorted
    ``(round, step, category, mass)`` tuples.
    """
    sums = defaultdict(float)
    counts = defaultdict(int)
    for tr in traces:
        ctx = list(tr["sources"])
        gen = _generated_sources(tr)
        for step, row in enumerate(tr["attention"]):
            extra = len(row) - len(ctx)
            if extra < 0 or extra > len(gen):
                raise InputError("attention row length does not match the trace")
            cats = np.array(ctx + gen[:extra])
            counts[(tr["round"], step)] += 1
            for c in CATEGORIES:
                sums[(tr["round"], step, c)] += float(row[cats == c].sum())
    out = []
    for (rnd, step), n in sorted(counts.items()):
        for c in CATEGORIES:
            out.append((rnd, step, c, sums[(rnd, step, c)] / n))
    return out


# --- CSV output -------------------------------------------------------------------------
def _csv(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def projections_csv(result: PcaResult, labels):
    m = result.projections.shape[1]
    return _csv(["label"] + [f"pc{i + 1}" for i in range(m)],
                [[l] + [repr(float(v)) for v in row] for l, row in zip(labels, result.projections)])


def variance_csv(result: PcaResult):
    return _csv(["component", "explained_ratio"],
                [[i + 1, repr(float(r))] for i, r in enumerate(result.explained_ratio)])


def attention_csv(report):
    return _csv(["round", "step", "category", "mass"],
                [[r, s, c, repr(float(m))] for r, s, c, m in report])

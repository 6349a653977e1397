"""Evaluation: directional similarity metrics over a view ring, a
deterministic toy embedding backend, the cross-view leakage score, the
VLM rubric builder, and the user-study planner/aggregator.

All metric math is float64 numpy. Scores are reported x100.
"""

import hashlib
import json
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .dataio import SceneParams, eyes_visible
from .errors import ConfigError, DataError
from .rng import numpy_generator

ZERO_NORM_EPS = 1e-8

RUBRIC_DIMENSIONS = [
    "Prompt Alignment",
    "3D Plausibility",
    "Identity Preservation",
    "Visual Quality",
    "3D Consistency",
    "Completeness",
    "Overall Quality",
]

STUDY_QUESTIONS = ["Prompt Alignment", "Visual Quality", "Shape Preservation"]
STUDY_BASELINES = ["baseline_a", "baseline_b", "baseline_c"]


# ---------------------------------------------------------------------------
# embedding backend

class ToyEmbeddingBackend:
    """Fixed-seed random linear maps over downsampled pixels / hashed words.

    Deterministic and unit-norm by construction; stands in for a CLIP
    encoder in every metric property test. No parity with any real encoder
    is claimed.
    """

    def __init__(self, dim: int = 64, seed: int = 1234):
        self.dim = dim
        self.backend_id = f"toy-linear-{dim}-{seed}"
        self._grid = 16
        rng = numpy_generator(seed, "image_proj")
        self._img_proj = rng.standard_normal((dim, 3 * self._grid * self._grid))
        self._img_bias = rng.standard_normal(dim)
        rng2 = numpy_generator(seed, "text_proj")
        self._txt_buckets = 512
        self._txt_proj = rng2.standard_normal((dim, self._txt_buckets))
        self._txt_bias = rng2.standard_normal(dim)

    def _normalize(self, v: np.ndarray) -> np.ndarray:
        n = np.linalg.norm(v)
        if n < ZERO_NORM_EPS:
            raise DataError("degenerate embedding (zero norm)")
        return v / n

    def embed_image(self, image: np.ndarray) -> np.ndarray:
        img = np.asarray(image, dtype=np.float64)
        if img.ndim != 3 or img.shape[0] != 3:
            raise DataError(f"expected (3, H, W) image, got {img.shape}")
        h = img.shape[1]
        if h % self._grid != 0:
            raise DataError(f"image side {h} not divisible by {self._grid}")
        f = h // self._grid
        pooled = img.reshape(3, self._grid, f, self._grid, f).mean(axis=(2, 4))
        feats = pooled.reshape(-1)
        return self._normalize(self._img_proj @ feats + 0.05 * self._img_bias)

    def embed_text(self, text: str) -> np.ndarray:
        if not text:
            raise DataError("empty text")
        hist = np.zeros(self._txt_buckets, dtype=np.float64)
        for word in text.lower().split():
            d = hashlib.sha256(word.encode("utf-8")).digest()
            hist[int.from_bytes(d[:4], "little") % self._txt_buckets] += 1.0
        return self._normalize(self._txt_proj @ hist + 0.05 * self._txt_bias)


# ---------------------------------------------------------------------------
# directional metrics

@dataclass
class DirectionalScores:
    dir: float
    dir_cos: float
    dir_avg: float
    dir_avg_cos: float
    excluded_views: int = 0

    def as_dict(self) -> dict:
        return {"dir": self.dir, "dir_cos": self.dir_cos,
                "dir_avg": self.dir_avg, "dir_avg_cos": self.dir_avg_cos,
                "excluded_views": self.excluded_views}


def directional_scores_from_embeddings(orig_embs: np.ndarray,
                                       edit_embs: np.ndarray,
                                       src_text_emb: np.ndarray,
                                       edit_text_emb: np.ndarray) -> DirectionalScores:
    """Metric core over precomputed embeddings; see directional_scores."""
    orig_embs = np.asarray(orig_embs, dtype=np.float64)
    edit_embs = np.asarray(edit_embs, dtype=np.float64)
    if orig_embs.shape != edit_embs.shape or orig_embs.ndim != 2:
        raise DataError("embedding arrays must share shape (V, k)")
    d_txt = np.asarray(edit_text_emb, dtype=np.float64) - np.asarray(src_text_emb, dtype=np.float64)
    txt_norm = np.linalg.norm(d_txt)
    if txt_norm < ZERO_NORM_EPS:
        raise DataError("text direction has zero norm (identical prompts?)")
    d_img = edit_embs - orig_embs                       # V, k
    dots = d_img @ d_txt                                # V
    dir_score = float(dots.mean())

    norms = np.linalg.norm(d_img, axis=1)
    included = norms >= ZERO_NORM_EPS
    excluded = int((~included).sum())
    if excluded:
        warnings.warn(f"{excluded} view(s) with zero-norm image direction "
                      "excluded from cosine means")
    if not included.any():
        raise DataError("every view excluded: no nonzero image direction")
    cosines = dots[included] / (norms[included] * txt_norm)
    dir_cos = float(cosines.mean())

    mean_dir = d_img.mean(axis=0)
    dir_avg = float(mean_dir @ d_txt)
    mean_norm = np.linalg.norm(mean_dir)
    if mean_norm < ZERO_NORM_EPS:
        raise DataError("mean image direction has zero norm")
    dir_avg_cos = float(mean_dir @ d_txt / (mean_norm * txt_norm))

    return DirectionalScores(dir=100.0 * dir_score, dir_cos=100.0 * dir_cos,
                             dir_avg=100.0 * dir_avg,
                             dir_avg_cos=100.0 * dir_avg_cos,
                             excluded_views=excluded)


def directional_scores(orig_views, edit_views, source_prompt: str,
                       edit_prompt: str, backend) -> DirectionalScores:
    """Per view v: d_img(v) = E(edit_v) - E(orig_v); d_txt likewise over
    prompts. dir averages dot products over views, dir_avg dots the
    averaged image direction; cosine variants normalize. All x100.
    """
    if len(orig_views) != len(edit_views):
        raise DataError(
            f"view count mismatch: {len(orig_views)} vs {len(edit_views)}"
        )
    if len(orig_views) == 0:
        raise DataError("empty view lists")
    orig_embs = np.stack([backend.embed_image(v) for v in orig_views])
    edit_embs = np.stack([backend.embed_image(v) for v in edit_views])
    return directional_scores_from_embeddings(
        orig_embs, edit_embs,
        backend.embed_text(source_prompt), backend.embed_text(edit_prompt))


# ---------------------------------------------------------------------------
# cross-view leakage (the multi-view consistency proxy)

def detect_front_feature(image: np.ndarray) -> bool:
    """Fires when a near-white blob of sufficient area sits in the upper
    part of the image; the synthetic scenes reserve near-white for the
    front-only eye feature."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise DataError(f"expected (3, H, W) image, got {img.shape}")
    h, w = img.shape[1], img.shape[2]
    upper = img[:, : int(0.60 * h), :]
    white = upper.min(axis=0) > 0.70
    min_area = 0.004 * h * w
    return bool(white.sum() >= min_area)


def leakage_score(views_by_pose, oracle) -> float:
    """Fraction of views that should NOT show the front feature where the
    detector nevertheless fires. 0 = no leakage, 1 = fully replicated.
    """
    if oracle is None or not isinstance(oracle, SceneParams):
        raise DataError("leakage oracle undefined: only synthetic scenes "
                        "carry a front-feature ground truth")
    should_not = [(pose, img) for pose, img in views_by_pose
                  if not eyes_visible(pose.azimuth_deg, oracle)]
    if not should_not:
        raise DataError("no views where the feature should be hidden; "
                        "leakage undefined")
    fires = sum(1 for _pose, img in should_not if detect_front_feature(img))
    return fires / len(should_not)


# ---------------------------------------------------------------------------
# VLM rubric

def vlm_rubric_prompt(orig_views, edit_views, edit_prompt: str) -> str:
    """Deterministic rubric text listing the seven scoring dimensions with
    0-10 scales and attachment slots. Builds the query only; nothing is
    sent anywhere."""
    lines = [
        "You are rating a 3D object edit shown as multi-view renders.",
        f"Editing instruction: {edit_prompt}",
        "",
        "Attachments:",
    ]
    for i in range(len(orig_views)):
        lines.append(f"[IMAGE {i + 1}: original view {i}]")
    for i in range(len(edit_views)):
        lines.append(f"[IMAGE {len(orig_views) + i + 1}: edited view {i}]")
    lines += [
        "",
        "Score each dimension on an integer scale from 0 (worst) to 10 (best):",
    ]
    for dim in RUBRIC_DIMENSIONS:
        lines.append(f"- {dim}: 0-10")
    lines += [
        "",
        "Answer as one JSON object mapping each dimension name to its score.",
    ]
    return "\n".join(lines)


def aggregate_vlm_scores(parsed_scores: list) -> dict:
    """Mean per dimension over a list of {dimension: score} mappings."""
    if not parsed_scores:
        raise DataError("no scores to aggregate")
    sums = {d: 0.0 for d in RUBRIC_DIMENSIONS}
    for entry in parsed_scores:
        missing = set(RUBRIC_DIMENSIONS) - set(entry)
        if missing:
            raise DataError(f"score entry missing dimensions: {sorted(missing)}")
        for d in RUBRIC_DIMENSIONS:
            sums[d] += float(entry[d])
    n = len(parsed_scores)
    return {d: sums[d] / n for d in RUBRIC_DIMENSIONS}


# ---------------------------------------------------------------------------
# user study

@dataclass
class StudyPlan:
    seed: int
    questions: list
    baselines: list
    n_cases: int
    assignments: list        # per participant: list of item dicts
    coverage: dict = field(default_factory=dict)

    def comparison_ids(self) -> list:
        return [f"{b}/case{c:02d}" for b in self.baselines
                for c in range(1, self.n_cases + 1)]

    def total_judgments(self) -> int:
        return sum(len(a) for a in self.assignments)

    def to_json(self) -> dict:
        return {"seed": self.seed, "questions": self.questions,
                "baselines": self.baselines, "n_cases": self.n_cases,
                "assignments": self.assignments, "coverage": self.coverage}


def plan_user_study(seed: int, n_participants: int = 30,
                    per_participant: int = 20, n_cases: int = 25,
                    baselines: Optional[list] = None,
                    min_coverage: int = 8) -> StudyPlan:
    """Stratified assignment: every participant rates per_participant
    comparisons split across baseline strata by a rotating quota; within a
    stratum, the comparisons with the highest remaining demand are taken
    first (seeded tie-breaking). Coverage within each stratum differs by
    at most 1 and never falls below min_coverage."""
    baselines = baselines or list(STUDY_BASELINES)
    n_strata = len(baselines)
    comparisons = n_participants * per_participant
    needed = min_coverage * n_cases * n_strata
    if comparisons < needed:
        raise ConfigError(
            f"infeasible study: {n_participants} x {per_participant} = "
            f"{comparisons} judgments < required {needed} "
            f"(= {min_coverage} coverage x {n_cases * n_strata} comparisons)"
        )
    if per_participant > n_cases * n_strata:
        raise ConfigError("per_participant exceeds the number of comparisons")

    rng = numpy_generator(seed, "study")
    base_quota = per_participant // n_strata
    remainder = per_participant % n_strata
    counts = {b: np.zeros(n_cases, dtype=int) for b in baselines}
    assignments = []
    for p in range(n_participants):
        # rotate which strata receive the remainder so totals stay balanced
        quotas = {}
        for s, b in enumerate(baselines):
            quotas[b] = base_quota + (1 if (s - p) % n_strata < remainder else 0)
        items = []
        for b in baselines:
            current = counts[b]
            # least-covered comparisons first; a seeded shuffle breaks ties
            tie = rng.permutation(n_cases)
            chosen = sorted(range(n_cases), key=lambda c: (current[c], tie[c]))
            for c in chosen[: quotas[b]]:
                current[c] += 1
                items.append({
                    "comparison_id": f"{b}/case{c + 1:02d}",
                    "case_id": c + 1,
                    "baseline": b,
                    "left": "ours" if rng.uniform() < 0.5 else "baseline",
                })
        assignments.append(items)

    coverage = {f"{b}/case{c + 1:02d}": int(counts[b][c])
                for b in baselines for c in range(n_cases)}
    plan = StudyPlan(seed=seed, questions=list(STUDY_QUESTIONS),
                     baselines=baselines, n_cases=n_cases,
                     assignments=assignments, coverage=coverage)
    cov = np.array(list(coverage.values()))
    if cov.min() < min_coverage:
        raise ConfigError(
            f"planner failed to reach coverage {min_coverage}; min is {cov.min()}"
        )
    for b in baselines:
        if counts[b].max() - counts[b].min() > 1:
            raise ConfigError(f"stratum {b} coverage spread exceeds 1")
    return plan


def load_study_plan(path: str) -> StudyPlan:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise DataError(f"study plan not found: {path}")
    except json.JSONDecodeError as exc:
        raise DataError(f"study plan is not valid JSON: {exc}")
    return StudyPlan(seed=raw["seed"], questions=raw["questions"],
                     baselines=raw["baselines"], n_cases=raw["n_cases"],
                     assignments=raw["assignments"], coverage=raw["coverage"])


def aggregate_study(plan: StudyPlan, responses: list) -> dict:
    """Preference percentages per (baseline, question).

    Each response: {participant, comparison_id, question, choice} with
    choice in {ours, baseline, undecided}. Undecided responses are excluded
    from the percentage denominator and reported separately.
    """
    valid_pairs = set()
    for p, items in enumerate(plan.assignments):
        for item in items:
            valid_pairs.add((p, item["comparison_id"]))
    tally = {(b, q): {"ours": 0, "baseline": 0, "undecided": 0}
             for b in plan.baselines for q in plan.questions}
    for resp in responses:
        key = (resp.get("participant"), resp.get("comparison_id"))
        if key not in valid_pairs:
            raise DataError(f"response references an unknown plan entry: {key}")
        q = resp.get("question")
        if q not in plan.questions:
            raise DataError(f"unknown question '{q}'")
        choice = resp.get("choice")
        if choice not in ("ours", "baseline", "undecided"):
            raise DataError(f"invalid choice '{choice}'")
        baseline = resp["comparison_id"].split("/")[0]
        tally[(baseline, q)][choice] += 1
    table = {}
    for (b, q), cell in tally.items():
        decided = cell["ours"] + cell["baseline"]
        table[f"{b}|{q}"] = {
            "preference_pct": None if decided == 0 else 100.0 * cell["ours"] / decided,
            "ours": cell["ours"],
            "baseline": cell["baseline"],
            "undecided": cell["undecided"],
        }
    return table

"""Identity, prompt-consistency and interaction-alignment metrics, plus prompt corpora.

Real scorers (face detector/embedder, CLIP-style text-image scorer, HOI
detector) are never loaded in-process. They plug in as callables, either
in-repo mocks or external processes speaking a JSON-lines protocol
(:class:`JsonLinesAdapter`).
"""
from __future__ import annotations

import json
import subprocess
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

SUBJECTS = ("man", "woman")

# (verb, object phrase); rendered as "a {subject} {verb} {object}"
HOI_INTERACTIONS = (
    ("surfing", "with a surfboard"),
    ("skateboarding", "with a skateboard"),
    ("jumping", "with a skateboard"),
    ("snowboarding", "with a snowboard"),
    ("sitting", "on a chair"),
    ("skiing", "with skis"),
    ("working", "on a laptop"),
    ("catching", "a frisbee"),
    ("carrying", "a suitcase"),
    ("talking", "on a cell phone"),
    ("hitting", "a sports ball"),
    ("cutting", "a cake"),
    ("riding", "a motorcycle"),
    ("riding", "a horse"),
    ("sitting", "on a bench"),
    ("eating", "pizza"),
    ("reading", "a book"),
    ("holding", "a cat"),
    ("drinking", "with a cup"),
    ("holding", "a toothbrush"),
    ("holding", "a teddy bear"),
    ("looking", "at a tv"),
    ("holding", "an umbrella"),
    ("laying", "on a bed"),
    ("looking", "at a dog"),
    ("carrying", "a book"),
    ("kicking", "a sports ball"),
    ("throwing", "a frisbee"),
    ("cutting", "with scissors"),
    ("riding", "a car"),
)

GENERAL_PROMPTS = {
    "Accessory": (
        "a {} wearing a red hat",
        "a {} wearing a Santa hat",
        "a {} wearing a rainbow scar",
        "a {} wearing a black top hat and a monocle",
        "a {} in a chef outfit",
        "a {} in a firefighter outfit",
        "a {} in a police outfit",
        "a {} wearing pink glasses",
        "a {} wearing a yellow shirt",
        "a {} in a purple wizard outfit",
    ),
    "Style": (
        "a painting of a {} in the style of Banksy",
        "a painting of a {} in the style of Vincent Van Gogh",
        "a colorful graffiti painting of a {}",
        "a watercolor painting of a {}",
        "a Greek marble sculpture of a {}",
        "a street art mural of a {}",
        "a black and white photograph of a {}",
        "a pointillism painting of a {}",
        "a Japanese woodblock print of a {}",
        "a street art stencil of a {}",
    ),
    "Context": (
        "a {} in the jungle",
        "a {} in the snow",
        "a {} on the beach",
        "a {} on a cobblestone street",
        "a {} on top of pink fabric",
        "a {} on top of a wooden floor",
        "a {} with a city in the background",
        "a {} with a mountain in the background",
        "a {} with a blue house in the background",
        "a {} on top of a purple rug in a forest",
    ),
    "Action": (
        "a {} riding a horse",
        "a {} holding a glass of wine",
        "a {} holding a piece of cake",
        "a {} giving a lecture",
        "a {} reading a book",
        "a {} gardening in the backyard",
        "a {} cooking a meal",
        "a {} working out at the gym",
        "a {} walking the dog",
        "a {} baking cookies",
    ),
}


@dataclass(frozen=True)
class HOITriplet:
    subject: str
    verb: str
    object: str

    def __post_init__(self):
        for name in ("subject", "verb", "object"):
            if not getattr(self, name).strip():
                raise ValueError(f"HOI triplet {name} must be non-empty")

    def render(self) -> str:
        return f"a {self.subject} {self.verb} {self.object}"

    def to_dict(self) -> dict:
        return {"subject": self.subject, "verb": self.verb, "object": self.object}


def _check_subject(subject: str) -> str:
    if not subject or not subject.strip():
        raise ValueError("subject must be non-empty")
    return subject


def hoi_triplets(subject: str) -> list[HOITriplet]:
    _check_subject(subject)
    return [HOITriplet(subject, verb, obj) for verb, obj in HOI_INTERACTIONS]


def build_hoi_prompts(subject: str) -> list[str]:
    return [t.render() for t in hoi_triplets(subject)]


def build_general_prompts(subject: str) -> dict[str, list[str]]:
    _check_subject(subject)
    return {cat: [tpl.format(subject) for tpl in tpls] for cat, tpls in GENERAL_PROMPTS.items()}


# ------------------------------------------------------------------ adapters

@dataclass(eq=False)
class EvalImage:
    pixels: np.ndarray
    name: str = ""
    path: Optional[str] = None


FaceBox = tuple[int, int, int, int]  # x0, y0, x1, y1


@dataclass
class ScorerAdapters:
    face_detector: Optional[Callable[[EvalImage], list]] = None
    face_embedder: Optional[Callable[[EvalImage], np.ndarray]] = None
    text_image_scorer: Optional[Callable[[EvalImage, str], float]] = None
    hoi_detector: Optional[Callable[[EvalImage, HOITriplet], float]] = None


class InvalidReferenceError(ValueError):
    pass


def _box_area(box) -> int:
    x0, y0, x1, y1 = box
    return max(0, x1 - x0) * max(0, y1 - y0)


def crop_largest_face(image: EvalImage, detector) -> Optional[EvalImage]:
    boxes = [tuple(int(v) for v in b) for b in detector(image)]
    boxes = [b for b in boxes if _box_area(b) > 0]
    if not boxes:
        return None
    x0, y0, x1, y1 = max(boxes, key=_box_area)
    return EvalImage(image.pixels[y0:y1, x0:x1], image.name, image.path)


def _embed(adapters: ScorerAdapters, crop: EvalImage) -> np.ndarray:
    v = np.asarray(adapters.face_embedder(crop), dtype=np.float64)
    norm = np.linalg.norm(v)
    if not np.isfinite(norm) or abs(norm - 1.0) > 1e-6:
        raise ValueError(f"face embedder must return unit vectors, got norm {norm}")
    return v


def _score(value: float) -> float:
    value = float(value)
    if not np.isfinite(value):
        raise ValueError(f"adapter returned non-finite score {value}")
    return min(max(value, 0.0), 1.0)


@dataclass
class MetricReport:
    rows: list = field(default_factory=list)
    aggregates: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"rows": self.rows, "aggregates": self.aggregates, "counts": self.counts}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def render_table(self, method: str = "generated", architecture: str = "-") -> str:
        headers = ["Method", "Architecture", "Identity Preservation (%)", "Prompt Consistency (%)",
                   "Interaction Alignment (%)"]
        keys = ["identity_preservation", "prompt_consistency", "interaction_alignment"]
        vals = [f"{self.aggregates[k]:.2f}" if k in self.aggregates else "NA" for k in keys]
        row = [method, architecture] + vals
        widths = [max(len(h), len(v)) for h, v in zip(headers, row)]
        line = lambda cells: " | ".join(c.ljust(w) if i < 2 else c.rjust(w)
                                        for i, (c, w) in enumerate(zip(cells, widths)))
        sep = "-+-".join("-" * w for w in widths)
        return "\n".join([line(headers), sep, line(row)])


def _mean_percent(scores: Sequence[float]) -> float:
    if len(scores) == 0:
        raise ValueError("no images to score")
    return 100.0 * float(np.mean(scores))


def identity_scores(images: Sequence[EvalImage], reference: EvalImage, adapters: ScorerAdapters) -> tuple[list, int]:
    ref_crop = crop_largest_face(reference, adapters.face_detector)
    if ref_crop is None:
        raise InvalidReferenceError("no face detected in the reference image")
    ref = _embed(adapters, ref_crop)
    scores, missing = [], 0
    for img in images:
        crop = crop_largest_face(img, adapters.face_detector)
        if crop is None:
            scores.append(0.0)
            missing += 1
            continue
        scores.append(_score(np.dot(ref, _embed(adapters, crop))))
    return scores, missing


def identity_preservation(images: Sequence[EvalImage], reference_image: EvalImage, adapters: ScorerAdapters) -> float:
    """Mean largest-face cosine similarity to the reference, in percent.

    Images without a detected face score 0.
    """
    scores, _ = identity_scores(images, reference_image, adapters)
    return _mean_percent(scores)


def prompt_scores(images, prompts, adapters) -> list:
    if len(images) != len(prompts):
        raise ValueError(f"{len(images)} images but {len(prompts)} prompts")
    return [_score(adapters.text_image_scorer(img, p)) for img, p in zip(images, prompts)]


def prompt_consistency(images: Sequence[EvalImage], prompts: Sequence[str], adapters: ScorerAdapters) -> float:
    return _mean_percent(prompt_scores(images, prompts, adapters))


def interaction_scores(images, triplets, adapters) -> list:
    if len(images) != len(triplets):
        raise ValueError(f"{len(images)} images but {len(triplets)} triplets")
    return [_score(adapters.hoi_detector(img, trip)) for img, trip in zip(images, triplets)]


def interaction_alignment(images: Sequence[EvalImage], triplets: Sequence[HOITriplet], adapters: ScorerAdapters) -> float:
    return _mean_percent(interaction_scores(images, triplets, adapters))


def evaluate(images: Sequence[EvalImage], adapters: ScorerAdapters, modes: Sequence[str],
             prompts: Optional[Sequence[str]] = None, triplets: Optional[Sequence[HOITriplet]] = None,
             reference: Optional[EvalImage] = None) -> MetricReport:
    rows = [{"image": img.name} for img in images]
    if prompts is not None:
        for row, p in zip(rows, prompts):
            row["prompt"] = p
    report = MetricReport(rows=rows)
    if "identity" in modes:
        if reference is None:
            raise ValueError("identity mode needs a reference image")
        scores, missing = identity_scores(images, reference, adapters)
        for row, s in zip(rows, scores):
            row["identity"] = s
        report.aggregates["identity_preservation"] = _mean_percent(scores)
        report.counts["undetected_faces"] = missing
    if "prompt" in modes:
        if prompts is None:
            raise ValueError("prompt mode needs prompts")
        scores = prompt_scores(images, prompts, adapters)
        for row, s in zip(rows, scores):
            row["prompt_consistency"] = s
        report.aggregates["prompt_consistency"] = _mean_percent(scores)
    if "interaction" in modes:
        if triplets is None:
            raise ValueError("interaction mode needs HOI triplets")
        scores = interaction_scores(images, triplets, adapters)
        for row, t, s in zip(rows, triplets, scores):
            row["triplet"] = t.to_dict()
            row["interaction"] = s
        report.aggregates["interaction_alignment"] = _mean_percent(scores)
        report.counts["undetected_interactions"] = sum(1 for s in scores if s == 0.0)
    return report


# --------------------------------------------------------------- mock adapters

@dataclass
class ConstantScorer:
    value: float

    def __call__(self, image, _query=None) -> float:
        return self.value


@dataclass
class ScriptedScorer:
    """Score looked up by image name."""

    scores: dict
    default: Optional[float] = None

    def __call__(self, image: EvalImage, _query=None) -> float:
        if image.name in self.scores:
            return self.scores[image.name]
        if self.default is None:
            raise KeyError(f"no scripted score for {image.name!r}")
        return self.default


@dataclass
class WholeImageFaceDetector:
    def __call__(self, image: EvalImage) -> list:
        h, w = image.pixels.shape[:2]
        return [(0, 0, w, h)]


@dataclass
class ScriptedFaceDetector:
    boxes: dict
    default: Optional[list] = None

    def __call__(self, image: EvalImage) -> list:
        if image.name in self.boxes:
            return self.boxes[image.name]
        if self.default == "whole":
            return WholeImageFaceDetector()(image)
        return self.default or []


@dataclass
class ScriptedEmbedder:
    vectors: dict
    default: Optional[Sequence[float]] = None

    def __call__(self, crop: EvalImage) -> np.ndarray:
        v = self.vectors.get(crop.name, self.default)
        if v is None:
            raise KeyError(f"no scripted embedding for {crop.name!r}")
        v = np.asarray(v, dtype=np.float64)
        return v / np.linalg.norm(v)


class JsonLinesAdapter:
    """Adapter backed by an external process speaking JSON lines.

    Each call writes ``{"image_path": ..., "text_or_triplet": ...}`` and
    reads one response line; ``field`` names the response key returned
    (``score`` for scorers, ``boxes`` for detectors, ``embedding`` for
    embedders). Not reentrant; guard with a lock or use one per worker.
    """

    def __init__(self, command: Sequence[str], field: str = "score"):
        self.command = list(command)
        self.field = field
        self._proc = None

    def _ensure(self):
        if self._proc is None or self._proc.poll() is not None:
            self._proc = subprocess.Popen(self.command, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                                          text=True, bufsize=1)
        return self._proc

    def __call__(self, image: EvalImage, query=None):
        if image.path is None:
            raise ValueError("external adapters need images that exist on disk")
        if isinstance(query, HOITriplet):
            query = query.to_dict()
        proc = self._ensure()
        proc.stdin.write(json.dumps({"image_path": image.path, "text_or_triplet": query}) + "\n")
        proc.stdin.flush()
        line = proc.stdout.readline()
        if not line:
            raise RuntimeError(f"adapter process {self.command} closed its output")
        return json.loads(line)[self.field]

    def close(self):
        if self._proc is not None:
            self._proc.stdin.close()
            self._proc.wait(timeout=10)
            self._proc = None


_DEFAULT_FIELDS = {
    "face_detector": "boxes",
    "face_embedder": "embedding",
    "text_image_scorer": "score",
    "hoi_detector": "score",
}


def _build_adapter(role: str, spec: dict):
    kind = spec.get("type")
    if kind == "constant":
        return ConstantScorer(float(spec["value"]))
    if kind == "scripted":
        if role == "face_detector":
            return ScriptedFaceDetector(spec.get("boxes", {}), spec.get("default"))
        if role == "face_embedder":
            return ScriptedEmbedder(spec.get("vectors", {}), spec.get("default"))
        return ScriptedScorer(spec.get("scores", {}), spec.get("default"))
    if kind == "whole_image" and role == "face_detector":
        return WholeImageFaceDetector()
    if kind == "none" and role == "face_detector":
        return lambda image: []
    if kind == "jsonl":
        return JsonLinesAdapter(spec["command"], spec.get("field", _DEFAULT_FIELDS[role]))
    raise ValueError(f"unsupported adapter {kind!r} for {role}")


def adapters_from_spec(spec: dict) -> ScorerAdapters:
    """Build adapters from an adapter-spec mapping (role -> {"type": ..., ...})."""
    unknown = set(spec) - set(_DEFAULT_FIELDS)
    if unknown:
        raise ValueError(f"unknown adapter roles: {sorted(unknown)}")
    return ScorerAdapters(**{role: _build_adapter(role, s) for role, s in spec.items()})


def load_adapter_spec(path) -> ScorerAdapters:
    return adapters_from_spec(json.loads(Path(path).read_text()))

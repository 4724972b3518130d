"""Benchmark datasets: JSONL loading/validation, splits, synthetic fixtures.

A dataset file is JSON Lines: a header object (no "id" field) declaring
name/schema, followed by one item object per line. See docs/datasets.md for
the field mapping, including how to convert Robo2VLM exports.
"""

from __future__ import annotations

import base64
import io
import json
import random
from dataclasses import dataclass, field
from pathlib import Path

QTYPES = ("yes_no", "multiple_choice", "free_form")
SCHEMAS = ("robo2vlm", "robot_collected")
HRI_CATEGORIES = (
    "human_presence_detection",
    "instruction_following",
    "spatial_relations",
    "social_navigation",
    "gesture_recognition",
)
ROBO2VLM_CATEGORIES = (
    "object_recognition",
    "spatial_reasoning",
    "manipulation_intent",
    "outcome_prediction",
)


class DatasetError(Exception):
    pass


class SchemaError(DatasetError):
    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line
        self.reason = reason


class DuplicateId(SchemaError):
    pass


class WrongSchema(DatasetError):
    pass


class DatasetValidationError(DatasetError):
    """Raised after a full pass; carries every per-line error."""

    def __init__(self, path: str, errors: list[SchemaError]):
        super().__init__(f"{path}: {len(errors)} invalid line(s); first: {errors[0]}")
        self.errors = errors


@dataclass
class DatasetItem:
    id: str
    question: str
    qtype: str
    gold: str
    choices: list[str] | None = None
    category: str | None = None
    image_path: Path | None = None
    image_b64: str | None = field(default=None, repr=False)

    def image_bytes(self) -> bytes:
        if self.image_b64 is not None:
            return base64.b64decode(self.image_b64)
        assert self.image_path is not None
        return self.image_path.read_bytes()

    def to_json(self) -> dict:
        d: dict = {"id": self.id, "question": self.question, "qtype": self.qtype, "gold": self.gold}
        if self.choices is not None:
            d["choices"] = self.choices
        if self.category is not None:
            d["category"] = self.category
        if self.image_b64 is not None:
            d["image_b64"] = self.image_b64
        elif self.image_path is not None:
            d["image"] = str(self.image_path)
        return d


@dataclass
class DatasetManifest:
    name: str
    schema: str
    items: list[DatasetItem]

    def __len__(self) -> int:
        return len(self.items)

    def by_id(self, item_id: str) -> DatasetItem:
        return self._index()[item_id]

    def _index(self) -> dict[str, DatasetItem]:
        if not hasattr(self, "_idx"):
            self._idx = {item.id: item for item in self.items}
        return self._idx


def _parse_item(obj: dict, line_no: int, schema: str, base_dir: Path) -> DatasetItem:
    for key in ("id", "question", "qtype", "gold"):
        if key not in obj:
            raise SchemaError(line_no, f"missing field {key!r}")
    if obj["qtype"] not in QTYPES:
        raise SchemaError(line_no, f"unknown qtype {obj['qtype']!r}")
    choices = obj.get("choices")
    if obj["qtype"] == "multiple_choice":
        if not isinstance(choices, list) or not 2 <= len(choices) <= 8:
            raise SchemaError(line_no, "multiple_choice needs 2..8 choices")
        if obj["gold"] not in choices:
            raise SchemaError(line_no, f"gold {obj['gold']!r} not among choices")
    elif choices is not None:
        raise SchemaError(line_no, f"choices given for qtype {obj['qtype']}")
    category = obj.get("category")
    if schema == "robot_collected":
        if category not in HRI_CATEGORIES:
            raise SchemaError(line_no, f"robot_collected item needs an HRI category, got {category!r}")
    image_path = None
    image_b64 = obj.get("image_b64")
    if image_b64 is None:
        ref = obj.get("image")
        if not ref:
            raise SchemaError(line_no, "item has neither image nor image_b64")
        image_path = (base_dir / ref).resolve()
        if not image_path.is_file():
            raise SchemaError(line_no, f"image not resolvable: {ref}")
    else:
        try:
            base64.b64decode(image_b64, validate=True)
        except (ValueError, TypeError):
            raise SchemaError(line_no, "image_b64 is not valid base64") from None
    if not str(obj["question"]).strip():
        raise SchemaError(line_no, "empty question")
    return DatasetItem(
        id=str(obj["id"]),
        question=obj["question"],
        qtype=obj["qtype"],
        gold=str(obj["gold"]),
        choices=list(choices) if choices is not None else None,
        category=category,
        image_path=image_path,
        image_b64=image_b64,
    )


def load_dataset(path: str | Path) -> DatasetManifest:
    """Parse and validate a JSONL dataset; fail-closed on any bad line."""
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise DatasetError(f"cannot read {path}: {e}") from None
    header: dict | None = None
    items: list[DatasetItem] = []
    errors: list[SchemaError] = []
    seen_ids: set[str] = set()
    for line_no, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            errors.append(SchemaError(line_no, f"invalid JSON: {e}"))
            continue
        if header is None:
            if not isinstance(obj, dict) or "id" in obj:
                errors.append(SchemaError(line_no, "first line must be a header without 'id'"))
                header = {"name": path.stem, "schema": "robo2vlm"}
            else:
                if obj.get("schema") not in SCHEMAS:
                    errors.append(SchemaError(line_no, f"unknown schema {obj.get('schema')!r}"))
                header = {"name": obj.get("name", path.stem), "schema": obj.get("schema", "robo2vlm")}
            continue
        if not isinstance(obj, dict):
            errors.append(SchemaError(line_no, "item line is not a JSON object"))
            continue
        try:
            item = _parse_item(obj, line_no, header["schema"], path.parent)
        except SchemaError as e:
            errors.append(e)
            continue
        if item.id in seen_ids:
            errors.append(DuplicateId(line_no, f"duplicate id {item.id!r}"))
            continue
        seen_ids.add(item.id)
        items.append(item)
    if header is None:
        errors.append(SchemaError(0, "empty file: missing header line"))
    if errors:
        raise DatasetValidationError(str(path), errors)
    return DatasetManifest(name=header["name"], schema=header["schema"], items=items)


def emit_dataset(manifest: DatasetManifest, path: str | Path) -> Path:
    """Serialize back to JSONL; load_dataset(emit_dataset(m)) == m."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps({"name": manifest.name, "schema": manifest.schema}) + "\n")
        for item in manifest.items:
            fh.write(json.dumps(item.to_json(), ensure_ascii=False) + "\n")
    return path


def split_by_category(manifest: DatasetManifest) -> dict[str, list[DatasetItem]]:
    if manifest.schema != "robot_collected":
        raise WrongSchema(f"per-category split needs robot_collected, got {manifest.schema}")
    groups: dict[str, list[DatasetItem]] = {}
    for item in manifest.items:
        groups.setdefault(item.category, []).append(item)
    return groups


def make_answer_table(manifest: DatasetManifest) -> dict[str, str]:
    return {item.id: item.gold for item in manifest.items}


# -- synthetic data -----------------------------------------------------------

_YESNO_TEMPLATES = [
    ("Is a person visible in the scene?", ("yes", "no")),
    ("Is the doorway on the left clear?", ("yes", "no")),
    ("Is anyone waving at the robot?", ("yes", "no")),
    ("Is the table in front of the robot occupied?", ("yes", "no")),
]

_MC_TEMPLATES = [
    ("Which object is closest to the robot?", ["red box", "blue box", "green cup", "yellow ball"]),
    ("Where should the robot go next?", ["left corridor", "right corridor", "straight ahead"]),
    ("What gesture is the person making?", ["waving", "pointing", "thumbs up", "none"]),
    ("Which side of the hallway is blocked?", ["left", "right", "neither"]),
]

_FREEFORM_TEMPLATES = [
    ("What color is the box on the table?", ["red", "blue", "green", "white"]),
    ("How many people are in the room?", ["one", "two", "three", "none"]),
    ("What is the person holding?", ["a cup", "a phone", "nothing", "a tool"]),
]


def synthetic_image_b64(rng: random.Random, width: int = 64, height: int = 64) -> str:
    """A small deterministic JPEG of seeded noise blocks."""
    from PIL import Image

    img = Image.new("RGB", (width, height))
    px = img.load()
    for by in range(0, height, 8):
        for bx in range(0, width, 8):
            color = (rng.randint(0, 255), rng.randint(0, 255), rng.randint(0, 255))
            for y in range(by, min(by + 8, height)):
                for x in range(bx, min(bx + 8, width)):
                    px[x, y] = color
    out = io.BytesIO()
    img.save(out, format="JPEG", quality=80)
    return base64.b64encode(out.getvalue()).decode("ascii")


def generate_synthetic_manifest(
    schema: str,
    n_items: int,
    seed: int,
    *,
    name: str | None = None,
    image_size: tuple[int, int] = (64, 64),
    per_category: dict[str, int] | None = None,
) -> DatasetManifest:
    """Deterministic synthetic dataset; same (schema, n, seed) -> same items."""
    if schema not in SCHEMAS:
        raise WrongSchema(f"unknown schema {schema!r}")
    rng = random.Random(seed)
    categories = HRI_CATEGORIES if schema == "robot_collected" else ROBO2VLM_CATEGORIES
    if per_category is not None:
        order: list[str | None] = []
        for cat, count in per_category.items():
            order += [cat] * count
        n_items = len(order)
    else:
        order = [categories[i % len(categories)] for i in range(n_items)]
    items = []
    for i in range(n_items):
        kind = rng.choice(("yes_no", "multiple_choice", "free_form"))
        choices = None
        if kind == "yes_no":
            question, answers = rng.choice(_YESNO_TEMPLATES)
            gold = rng.choice(answers)
        elif kind == "multiple_choice":
            question, choices = rng.choice(_MC_TEMPLATES)
            choices = list(choices)
            gold = rng.choice(choices)
        else:
            question, answers = rng.choice(_FREEFORM_TEMPLATES)
            gold = rng.choice(answers)
        items.append(
            DatasetItem(
                id=f"item-{i:04d}",
                question=question,
                qtype=kind,
                gold=gold,
                choices=choices,
                category=order[i],
                image_b64=synthetic_image_b64(rng, *image_size),
            )
        )
    return DatasetManifest(
        name=name or f"synthetic-{schema}-{n_items}-seed{seed}", schema=schema, items=items
    )


def fixture_path(name: str = "robot_collected_20.jsonl") -> Path:
    """Path of a dataset fixture bundled with the package."""
    return Path(__file__).parent / "data" / name

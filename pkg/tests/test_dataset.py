"""Dataset loading, validation fail-closed behavior, splits, fixtures."""

import base64
import json

import pytest

from edgevqa.dataset import (
    HRI_CATEGORIES,
    DatasetValidationError,
    DuplicateId,
    WrongSchema,
    emit_dataset,
    fixture_path,
    generate_synthetic_manifest,
    load_dataset,
    make_answer_table,
    split_by_category,
    synthetic_image_b64,
)

TINY_B64 = base64.b64encode(b"\xff\xd8notreallyjpeg").decode()


def write_jsonl(path, header, items):
    lines = [json.dumps(header)] + [json.dumps(i) for i in items]
    path.write_text("\n".join(lines) + "\n")
    return path


def valid_item(i, **over):
    d = {
        "id": f"it-{i}",
        "question": "Is a person visible?",
        "qtype": "yes_no",
        "gold": "yes",
        "image_b64": TINY_B64,
    }
    d.update(over)
    return d


class TestLoader:
    def test_three_valid_lines(self, tmp_path):
        p = write_jsonl(
            tmp_path / "d.jsonl",
            {"name": "mini", "schema": "robo2vlm"},
            [valid_item(i) for i in range(3)],
        )
        m = load_dataset(p)
        assert m.name == "mini"
        assert len(m.items) == 3
        assert m.items[0].image_bytes().startswith(b"\xff\xd8")

    def test_gold_not_in_choices_fails(self, tmp_path):
        p = write_jsonl(
            tmp_path / "d.jsonl",
            {"name": "mini", "schema": "robo2vlm"},
            [valid_item(0, qtype="multiple_choice", choices=["red", "blue"], gold="green")],
        )
        with pytest.raises(DatasetValidationError) as exc:
            load_dataset(p)
        assert len(exc.value.errors) == 1
        assert exc.value.errors[0].line == 2

    def test_k_bad_lines_report_k_errors_and_load_nothing(self, tmp_path):
        items = [
            valid_item(0),
            valid_item(1, qtype="nonsense"),
            valid_item(2),
            {"id": "it-3"},  # missing fields
            valid_item(4, gold="maybe", qtype="multiple_choice", choices=["a", "b"]),
        ]
        p = write_jsonl(tmp_path / "d.jsonl", {"name": "x", "schema": "robo2vlm"}, items)
        with pytest.raises(DatasetValidationError) as exc:
            load_dataset(p)
        assert len(exc.value.errors) == 3
        assert [e.line for e in exc.value.errors] == [3, 5, 6]

    def test_duplicate_id(self, tmp_path):
        p = write_jsonl(
            tmp_path / "d.jsonl",
            {"name": "x", "schema": "robo2vlm"},
            [valid_item(0), valid_item(0)],
        )
        with pytest.raises(DatasetValidationError) as exc:
            load_dataset(p)
        assert isinstance(exc.value.errors[0], DuplicateId)

    def test_robot_collected_requires_hri_category(self, tmp_path):
        p = write_jsonl(
            tmp_path / "d.jsonl",
            {"name": "x", "schema": "robot_collected"},
            [valid_item(0, category="cooking")],
        )
        with pytest.raises(DatasetValidationError):
            load_dataset(p)

    def test_missing_image_file(self, tmp_path):
        item = valid_item(0)
        del item["image_b64"]
        item["image"] = "nope.jpg"
        p = write_jsonl(tmp_path / "d.jsonl", {"name": "x", "schema": "robo2vlm"}, [item])
        with pytest.raises(DatasetValidationError):
            load_dataset(p)

    def test_image_path_resolved_relative_to_manifest(self, tmp_path):
        (tmp_path / "img.jpg").write_bytes(b"\xff\xd8data")
        item = valid_item(0)
        del item["image_b64"]
        item["image"] = "img.jpg"
        p = write_jsonl(tmp_path / "d.jsonl", {"name": "x", "schema": "robo2vlm"}, [item])
        m = load_dataset(p)
        assert m.items[0].image_bytes() == b"\xff\xd8data"

    def test_unreadable_file(self, tmp_path):
        with pytest.raises(Exception):
            load_dataset(tmp_path / "missing.jsonl")

    def test_roundtrip(self, tmp_path):
        m = generate_synthetic_manifest("robot_collected", 10, seed=3)
        p = emit_dataset(m, tmp_path / "rt.jsonl")
        assert load_dataset(p) == m


class TestFixture:
    def test_bundled_fixture_histogram(self):
        m = load_dataset(fixture_path())
        assert m.schema == "robot_collected"
        hist = {}
        for item in m.items:
            hist[item.category] = hist.get(item.category, 0) + 1
        assert sorted(hist.values()) == [4, 4, 4, 4, 4]
        assert set(hist) == set(HRI_CATEGORIES)


class TestSplitAndTable:
    def test_split_partitions_fixture(self):
        m = load_dataset(fixture_path())
        groups = split_by_category(m)
        assert len(groups) == 5
        assert sum(len(v) for v in groups.values()) == len(m.items)
        flat = {item.id for items in groups.values() for item in items}
        assert flat == {item.id for item in m.items}

    def test_split_rejects_robo2vlm(self):
        m = generate_synthetic_manifest("robo2vlm", 5, seed=1)
        with pytest.raises(WrongSchema):
            split_by_category(m)

    def test_split_random_manifests_preserve_counts(self):
        for seed in range(10):
            m = generate_synthetic_manifest("robot_collected", 17, seed=seed)
            groups = split_by_category(m)
            assert sum(len(v) for v in groups.values()) == 17

    def test_answer_table(self):
        m = load_dataset(fixture_path())
        table = make_answer_table(m)
        assert len(table) == 20
        for item in m.items:
            assert table[item.id] == item.gold

    def test_answer_table_empty_manifest(self):
        m = generate_synthetic_manifest("robo2vlm", 0, seed=0)
        assert make_answer_table(m) == {}


class TestSynthetic:
    def test_deterministic(self):
        a = generate_synthetic_manifest("robo2vlm", 8, seed=42)
        b = generate_synthetic_manifest("robo2vlm", 8, seed=42)
        assert a == b

    def test_images_decode(self):
        import io
        from PIL import Image

        b64 = synthetic_image_b64(__import__("random").Random(1), 32, 32)
        img = Image.open(io.BytesIO(base64.b64decode(b64)))
        assert img.size == (32, 32)

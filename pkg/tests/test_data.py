"""
Tests for ingest, dedup, purchase filtering, splitting and instance generation
"""

import pandas as pd
import pytest
from numpy.testing import assert_array_equal

from bmlp.core.encoding import build_vocab
from bmlp.core.model import HyperParams, ModelParams
from bmlp.data.ingest import (
    InteractionRecord,
    exclude_time_range,
    ingest,
    ratings_to_behaviors,
    records_frame,
)
from bmlp.data.preprocess import dedup_earliest, iterative_filter
from bmlp.data.split import (
    Event,
    gen_instances,
    read_split_dir,
    split,
    user_sequences,
    write_split_dir,
)
from bmlp.errors import ConfigurationError, EmptyDatasetError, MalformedInputError
from bmlp.evaluation.analysis import evaluate


def frame_of(rows):
    return records_frame([InteractionRecord(u, i, b, t) for u, i, b, t in rows])


@pytest.fixture
def fixture_frame(fixture_dir):
    frame = dedup_earliest(ingest(fixture_dir / "interactions.tsv").records)
    filtered, _ = iterative_filter(frame, 2, 2, "buy")
    return filtered


@pytest.fixture
def fixture_split(fixture_frame):
    vocab = build_vocab(fixture_frame, "buy")
    return split(fixture_frame, vocab), vocab


class TestIngest:

    def test_three_line_file(self, tmp_path):
        path = tmp_path / "log.tsv"
        path.write_text(
            "user\titem\tbehavior\ttimestamp\n"
            "u1\tA\tclick\t10\n"
            "u1\tA\tbuy\t20\n"
            "u2\tB\tfav\t15\n"
        )
        result = ingest(path)
        assert result.malformed == 0
        assert result.records["user"].tolist() == ["u1", "u1", "u2"]
        assert result.records["timestamp"].tolist() == [10, 20, 15]
        assert result.records["timestamp"].dtype == "int64"
        assert result.to_records()[1] == InteractionRecord("u1", "A", "buy", 20)

    def test_csv_with_remapped_columns(self, tmp_path):
        path = tmp_path / "log.csv"
        path.write_text("5,u1,A,buy,x\n7,u2,B,click,y\n")
        result = ingest(
            path, "csv", columns=["timestamp", "user", "item", "behavior", "extra"], has_header=False
        )
        assert result.records["item"].tolist() == ["A", "B"]
        assert list(result.records.columns) == ["user", "item", "behavior", "timestamp"]

    def test_malformed_timestamp_beyond_tolerance(self, tmp_path):
        path = tmp_path / "log.tsv"
        path.write_text("user\titem\tbehavior\ttimestamp\nu1\tA\tclick\tsoon\nu1\tA\tbuy\t20\n")
        with pytest.raises(MalformedInputError, match="soon"):
            ingest(path)

    def test_single_bad_line_in_two_hundred_is_skipped(self, tmp_path):
        lines = [f"u{k % 7}\ti{k % 11}\tclick\t{k}" for k in range(199)]
        lines.insert(50, "u1\ti1\tclick")
        path = tmp_path / "log.tsv"
        path.write_text("user\titem\tbehavior\ttimestamp\n" + "\n".join(lines) + "\n")
        result = ingest(path)
        assert (result.total_lines, result.malformed, len(result.records)) == (200, 1, 199)

    def test_unknown_behavior_is_malformed(self, tmp_path):
        path = tmp_path / "log.tsv"
        path.write_text("user\titem\tbehavior\ttimestamp\nu1\tA\tclick\t1\nu1\tA\tcart\t2\n")
        with pytest.raises(MalformedInputError):
            ingest(path, behaviors=["click", "buy"])

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            ingest(tmp_path / "nope.tsv")

    def test_bad_format_and_mapping(self, tmp_path):
        with pytest.raises(ConfigurationError):
            ingest(tmp_path / "x", fmt="json")
        with pytest.raises(ConfigurationError, match="timestamp"):
            ingest(tmp_path / "x", columns=["user", "item", "behavior"])

    def test_fixture(self, fixture_dir):
        result = ingest(fixture_dir / "interactions.tsv")
        assert len(result.records) == 412
        assert result.malformed == 0


class TestTransforms:

    def test_ratings_threshold(self):
        frame = frame_of([("u1", "A", "5", 1), ("u1", "B", "3", 2), ("u2", "A", "4", 3)])
        out = ratings_to_behaviors(frame, threshold=4)
        assert out["behavior"].tolist() == ["buy", "click", "buy"]
        assert frame["behavior"].tolist() == ["5", "3", "4"]

    def test_non_numeric_rating(self):
        with pytest.raises(ConfigurationError):
            ratings_to_behaviors(frame_of([("u1", "A", "great", 1)]))

    def test_exclude_time_range_is_half_open(self):
        frame = frame_of([("u1", "A", "buy", t) for t in (5, 10, 15, 20)])
        assert exclude_time_range(frame, 10, 20)["timestamp"].tolist() == [5, 20]

    def test_exclude_empty_range(self):
        with pytest.raises(ConfigurationError):
            exclude_time_range(frame_of([("u1", "A", "buy", 1)]), 5, 5)


class TestDedup:

    def test_keeps_earliest_timestamp(self):
        frame = frame_of([("u1", "A", "click", 5), ("u1", "A", "click", 3)])
        out = dedup_earliest(frame)
        assert out["timestamp"].tolist() == [3]

    def test_equal_timestamps_keep_first_line(self):
        frame = frame_of([("u1", "A", "click", 3), ("u1", "B", "buy", 1), ("u1", "A", "click", 3)])
        out = dedup_earliest(frame)
        assert out.index.tolist() == [0, 1]

    def test_different_behaviors_are_distinct(self):
        frame = frame_of([("u1", "A", "click", 1), ("u1", "A", "buy", 2)])
        pd.testing.assert_frame_equal(dedup_earliest(frame), frame)

    def test_fixture_duplicates(self, fixture_dir):
        frame = ingest(fixture_dir / "interactions.tsv").records
        assert len(frame) - len(dedup_earliest(frame)) == 7


class TestIterativeFilter:

    def test_already_satisfied_is_identity(self):
        frame = frame_of([("u1", "A", "buy", 1), ("u1", "B", "buy", 2), ("u2", "A", "buy", 3), ("u2", "B", "buy", 4)])
        out, stats = iterative_filter(frame, 2, 2, "buy")
        pd.testing.assert_frame_equal(out, frame)
        assert stats.rounds == 1

    def test_cascade_needs_a_second_pass(self):
        frame = frame_of([
            ("u1", "A", "buy", 1), ("u1", "B", "buy", 2),
            ("u2", "A", "buy", 3), ("u2", "B", "buy", 4),
            ("u3", "A", "buy", 5), ("u3", "C", "buy", 6),
        ])
        out, stats = iterative_filter(frame, 2, 2, "buy")
        assert len(out) == 4
        assert stats.rounds == 2
        assert stats.removed_items == ["C"]
        assert stats.removed_users == ["u3"]
        assert stats.removed_records == 2

    def test_everything_removed(self):
        with pytest.raises(EmptyDatasetError):
            iterative_filter(frame_of([("u1", "A", "buy", 1), ("u1", "A", "click", 2)]), 1, 2, "buy")

    def test_threshold_below_one(self):
        with pytest.raises(ConfigurationError):
            iterative_filter(frame_of([("u1", "A", "buy", 1)]), 0, 1, "buy")

    def test_fixture_fixed_point(self, fixture_dir):
        frame = dedup_earliest(ingest(fixture_dir / "interactions.tsv").records)
        out, stats = iterative_filter(frame, 2, 2, "buy")
        assert (len(out), stats.rounds) == (400, 2)
        buys = out[out["behavior"] == "buy"]
        assert buys["item"].value_counts().min() >= 2
        assert buys["user"].value_counts().min() >= 2
        assert set(out["item"]) == set(buys["item"])

        again, again_stats = iterative_filter(out, 2, 2, "buy")
        pd.testing.assert_frame_equal(again, out)
        assert again_stats.rounds == 1


HAND_ROWS = [
    ("u1", "A", "click", 1), ("u1", "A", "buy", 2), ("u1", "B", "click", 3),
    ("u1", "B", "buy", 4), ("u1", "C", "buy", 5),
    ("u2", "A", "click", 1), ("u2", "A", "buy", 2), ("u2", "B", "buy", 3),
    ("u3", "C", "buy", 9),
]


# u2 buys on its first event, so its validation history is empty
PURCHASE_FIRST_ROWS = [
    ("u1", "A", "click", 1), ("u1", "A", "buy", 2), ("u1", "B", "click", 3),
    ("u1", "B", "buy", 4), ("u1", "C", "buy", 5),
    ("u2", "A", "buy", 1), ("u2", "B", "buy", 2),
]


class TestSplit:

    def test_hand_walk(self):
        frame = frame_of(HAND_ROWS)
        vocab = build_vocab(frame, "buy")
        A, B, C = (vocab.item_index[x] for x in "ABC")
        click, buy = vocab.behavior_index["click"], vocab.behavior_index["buy"]
        data = split(frame, vocab)

        assert data.train["u1"] == [Event(A, click, 1), Event(A, buy, 2), Event(B, click, 3)]
        assert data.train["u2"] == [Event(A, click, 1)]
        assert data.excluded_users == ["u3"]
        assert [(s.user, s.target_item) for s in data.validation] == [("u1", B), ("u2", A)]
        assert data.validation[0].history == data.train["u1"]
        # u1's test target C never occurs in training
        assert [(s.user, s.target_item) for s in data.test] == [("u2", B)]
        assert data.cold_start == {"validation": 0, "test": 1}
        assert data.test[0].history == [Event(A, click, 1), Event(A, buy, 2)]

    def test_purchase_first_user_has_no_validation_sample(self):
        frame = frame_of(PURCHASE_FIRST_ROWS)
        vocab = build_vocab(frame, "buy")
        A, B = vocab.item_index["A"], vocab.item_index["B"]
        data = split(frame, vocab)

        assert [(s.user, s.target_item) for s in data.validation] == [("u1", B)]
        assert data.empty_history == 1
        assert data.counts()["empty_history_validation"] == 1
        assert [(s.user, s.target_item) for s in data.test] == [("u2", B)]
        assert data.test[0].pairs() == [(A, vocab.target_behavior)]

    def test_split_parts_evaluate(self, tiny_hyper):
        frame = frame_of(PURCHASE_FIRST_ROWS)
        vocab = build_vocab(frame, "buy")
        data = split(frame, vocab)
        params = ModelParams.allocate(tiny_hyper, vocab.n_items, vocab.n_behaviors)
        for part in (data.validation, data.test):
            report = evaluate(params, part, tiny_hyper, vocab, ks=(10,))
            assert report.n_samples == 1
            assert report.hr[10] == 1.0

    def test_events_sorted_by_time_then_file_order(self):
        frame = frame_of([("u1", "B", "buy", 7), ("u1", "A", "click", 3), ("u1", "C", "click", 7)])
        vocab = build_vocab(frame, "buy")
        seq = user_sequences(frame, vocab)["u1"]
        assert [vocab.item_id(e.item) for e in seq] == ["A", "B", "C"]

    def test_no_test_samples(self):
        frame = frame_of([("u1", "A", "buy", 1)])
        with pytest.raises(EmptyDatasetError):
            split(frame, build_vocab(frame, "buy"))

    def test_fixture_counts(self, fixture_split):
        data, vocab = fixture_split
        assert (vocab.n_items, vocab.n_behaviors) == (20, 3)
        assert vocab.behaviors == ["click", "fav", "buy"]
        assert data.counts() == {
            "train_users": 29,
            "train_events": 255,
            "validation": 29,
            "test": 29,
            "excluded_users": 0,
            "cold_start_validation": 0,
            "cold_start_test": 0,
            "empty_history_validation": 0,
        }

    def test_histories_never_reach_their_targets(self, fixture_split, fixture_frame):
        data, vocab = fixture_split
        sequences = user_sequences(fixture_frame, vocab)
        for valid, test in zip(data.validation, data.test):
            events = sequences[valid.user]
            assert events[len(valid.history)].item == valid.target_item
            assert events[len(test.history)].item == test.target_item
            assert test.history[: len(valid.history)] == valid.history
            assert len(test.history) > len(valid.history)
            assert data.train[valid.user] == valid.history


class TestInstances:

    def test_only_purchases_after_first_event(self):
        frame = frame_of(HAND_ROWS)
        vocab = build_vocab(frame, "buy")
        data = split(frame, vocab)
        hyper = HyperParams(d=4, seq_len=4, aux_len=2)
        instances = gen_instances(data.train, hyper, vocab)
        assert [(i.user, i.position, i.target_item) for i in instances] == [("u1", 1, vocab.item_index["A"])]
        everything = gen_instances(data.train, hyper.model_copy(update={"train_on_all_behaviors": True}), vocab)
        assert [i.position for i in everything] == [1, 2]

    def test_fixture_instances(self, fixture_split):
        data, vocab = fixture_split
        hyper = HyperParams(d=4, seq_len=5, aux_len=3)
        instances = gen_instances(data.train, hyper, vocab)
        assert len(instances) == 42
        first = instances[0]
        assert first.user == "u01"
        assert_array_equal(first.hetero.items, [0, 0, 1, 1, 2])
        assert_array_equal(first.hetero.behaviors, [0, 0, 1, 2, 1])
        assert first.target_item == 2

    def test_instances_only_see_the_past(self, fixture_split):
        data, vocab = fixture_split
        hyper = HyperParams(d=4, seq_len=50, aux_len=3)
        for inst in gen_instances(data.train, hyper, vocab):
            events = data.train[inst.user]
            assert events[inst.position].item == inst.target_item
            real = inst.hetero.items[inst.hetero.mask]
            assert real.tolist() == [e.item for e in events[: inst.position]][-hyper.seq_len:]


class TestSplitDir:

    def test_write_then_read(self, tmp_path, fixture_split):
        data, vocab = fixture_split
        write_split_dir(tmp_path, data, vocab, intent=data.test[:3])
        again, again_vocab, intent = read_split_dir(tmp_path)
        assert again_vocab == vocab
        assert again.train == data.train
        assert again.validation == data.validation
        assert again.test == data.test
        assert intent == data.test[:3]

    def test_intent_file_optional(self, tmp_path, fixture_split):
        data, vocab = fixture_split
        written = write_split_dir(tmp_path, data, vocab)
        assert "intent" not in written
        assert read_split_dir(tmp_path)[2] is None

    def test_bytes_are_deterministic(self, tmp_path, fixture_split):
        data, vocab = fixture_split
        a = write_split_dir(tmp_path / "a", data, vocab)
        b = write_split_dir(tmp_path / "b", data, vocab)
        for part in a:
            assert a[part].read_bytes() == b[part].read_bytes()

    def test_missing_directory(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            read_split_dir(tmp_path / "absent")


class TestBehaviorFixture:

    def test_target_is_only_visible_through_behavior(self, behavior_fixture_dir):
        frame = ingest(behavior_fixture_dir / "interactions.tsv").records
        vocab = build_vocab(frame, "buy")
        data = split(frame, vocab)
        assert (len(data.validation), len(data.test)) == (60, 60)
        fav, click = vocab.behavior_index["fav"], vocab.behavior_index["click"]
        for sample in data.validation + data.test:
            window = sample.history[-24:]
            items = [e.item for e in window]
            assert all(items.count(i) == 2 for i in items)
            inverted = [
                a.item for a, b in zip(window, window[1:])
                if a.item == b.item and (a.behavior, b.behavior) == (fav, click)
            ]
            assert inverted == [sample.target_item]
        assert len(gen_instances(data.train, HyperParams(d=8, seq_len=24, aux_len=5), vocab)) == 240

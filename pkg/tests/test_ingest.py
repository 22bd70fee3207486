import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from caspr import ingest
from caspr.errors import EmptyDataset, ParseError, SchemaMismatch
from caspr.ingest import ColumnSpec, Schema, build_sequences, embed_dim_for, encode_rows, fit_schema


def make_schema(extra=()):
    cols = [ColumnSpec("entity", "entity_id"), ColumnSpec("ts", "timestamp")] + list(extra)
    return Schema(cols)


def rows_of(schema, records):
    names = [c.name for c in schema.columns]
    return [dict(zip(names, map(str, rec))) for rec in records]


class TestSchema:
    def test_duplicate_names_rejected(self):
        with pytest.raises(SchemaMismatch):
            Schema([ColumnSpec("a", "entity_id"), ColumnSpec("a", "timestamp")])

    def test_exactly_one_entity_and_timestamp(self):
        with pytest.raises(SchemaMismatch):
            Schema([ColumnSpec("a", "entity_id"), ColumnSpec("b", "entity_id"),
                    ColumnSpec("ts", "timestamp")])
        with pytest.raises(SchemaMismatch):
            Schema([ColumnSpec("a", "entity_id")])

    def test_json_roundtrip(self):
        schema = Schema([ColumnSpec("e", "entity_id"), ColumnSpec("ts", "timestamp"),
                         ColumnSpec("amt", "numerical")], monetary="amt")
        again = Schema.from_json(schema.to_json())
        assert again == schema


class TestEmbedDim:
    def test_sixteen_values_gives_four(self):
        assert embed_dim_for(16) == 4

    def test_single_value_gives_one(self):
        assert embed_dim_for(1) == 1

    def test_rule_over_full_range(self):
        for c in range(1, 10_001):
            assert embed_dim_for(c) == max(1, math.ceil(math.sqrt(c)))


class TestFitSchema:
    def test_empty_stream(self):
        with pytest.raises(EmptyDataset):
            fit_schema([], make_schema())

    def test_vocab_first_seen_order_and_stats(self):
        schema = make_schema([ColumnSpec("tier", "categorical"), ColumnSpec("x", "numerical")])
        recs = rows_of(schema, [("a", 1, "gold", 10.0), ("a", 2, "silver", 12.0),
                                ("b", 3, "gold", 8.0)])
        fitted = fit_schema(recs, schema)
        assert fitted.vocab["tier"] == ["gold", "silver"]
        assert fitted.code_of("tier", "gold") == 1
        assert fitted.code_of("tier", "silver") == 2
        np.testing.assert_allclose(fitted.means["x"], 10.0)
        np.testing.assert_allclose(fitted.stds["x"], np.std([10.0, 12.0, 8.0]))

    def test_constant_column_std_is_one(self):
        schema = make_schema([ColumnSpec("x", "numerical")])
        fitted = fit_schema(rows_of(schema, [("a", 1, 7.0), ("a", 2, 7.0)]), schema)
        assert fitted.means["x"] == 7.0
        assert fitted.stds["x"] == 1.0

    def test_embed_dim_from_observed_cardinality(self):
        schema = make_schema([ColumnSpec("c", "categorical")])
        recs = rows_of(schema, [("a", i, f"v{i % 16}") for i in range(60)])
        fitted = fit_schema(recs, schema)
        assert fitted.embed_dims["c"] == 4

    def test_malformed_number_carries_row_index(self):
        schema = make_schema([ColumnSpec("x", "numerical")])
        with pytest.raises(ParseError) as exc:
            fit_schema(rows_of(schema, [("a", 1, 1.0), ("a", 2, "oops")]), schema)
        assert exc.value.row_index == 1

    def test_bad_timestamp_rejected(self):
        schema = make_schema()
        with pytest.raises(ParseError):
            fit_schema([{"entity": "a", "ts": "not-a-time"}], schema)

    def test_iso_timestamp_accepted(self):
        assert ingest.parse_timestamp("1970-01-01T00:01:00Z") == 60
        assert ingest.parse_timestamp("1970-01-01T00:01:00+00:00") == 60


class TestEncodeRows:
    def setup_method(self):
        self.schema = make_schema([ColumnSpec("tier", "categorical"), ColumnSpec("x", "numerical")])
        self.recs = rows_of(self.schema, [("a", 1, "gold", 10.0), ("a", 2, "silver", 12.0),
                                          ("b", 3, "bronze", 8.0)])
        self.fitted = fit_schema(self.recs, self.schema)

    def test_vocab_lookup(self):
        rows = encode_rows(self.recs, self.fitted)
        assert rows[0].cats[0] == 1 and rows[1].cats[0] == 2

    def test_unseen_value_maps_to_zero(self):
        recs = rows_of(self.schema, [("c", 5, "platinum", 10.0)])
        assert encode_rows(recs, self.fitted)[0].cats[0] == 0

    def test_zscore_identity(self):
        fitted = ingest.FittedSchema(self.schema, vocab={"tier": ["gold"]},
                                     means={"x": 10.0}, stds={"x": 2.0})
        recs = rows_of(self.schema, [("a", 1, "gold", 12.0)])
        np.testing.assert_allclose(encode_rows(recs, fitted)[0].nums[0], 1.0)

    def test_zscored_column_has_zero_mean_unit_std(self):
        rng = np.random.default_rng(0)
        values = rng.normal(5.0, 3.0, size=500)
        schema = make_schema([ColumnSpec("x", "numerical")])
        recs = rows_of(schema, [("a", i, v) for i, v in enumerate(values)])
        fitted = fit_schema(recs, schema)
        z = np.array([r.nums[0] for r in encode_rows(recs, fitted)])
        assert abs(z.mean()) < 1e-6
        assert abs(z.std() - 1.0) < 1e-6


class TestBuildSequences:
    def setup_method(self):
        self.schema = make_schema([ColumnSpec("x", "numerical")])

    def _sequences(self, records, t):
        fitted = fit_schema(rows_of(self.schema, records), self.schema)
        rows = encode_rows(rows_of(self.schema, records), fitted)
        return build_sequences(rows, fitted, t)

    def test_truncation_keeps_latest(self):
        recs = [("a", i, float(i)) for i in range(20)]
        (seq,) = self._sequences(recs, 15)
        assert len(seq.steps) == 15
        assert [s.ts for s in seq.steps] == list(range(5, 20))
        assert seq.pad_len == 0

    def test_padding_arithmetic(self):
        recs = [("a", i, float(i)) for i in range(3)]
        (seq,) = self._sequences(recs, 15)
        assert len(seq.steps) == 3 and seq.pad_len == 12

    def test_shuffled_timestamps_sorted(self):
        recs = [("a", 30, 1.0), ("a", 10, 2.0), ("a", 20, 3.0)]
        (seq,) = self._sequences(recs, 15)
        assert [s.ts for s in seq.steps] == [10, 20, 30]

    def test_permutation_invariance(self):
        # invariance is over row order fed to build_sequences; fitting itself
        # is order-sensitive by contract (vocab keeps first-seen order)
        rng = np.random.default_rng(1)
        recs = [(f"e{i % 7}", int(ts), float(rng.normal())) for i, ts in
                enumerate(rng.choice(10_000, size=60, replace=False))]
        raw = rows_of(self.schema, recs)
        fitted = fit_schema(raw, self.schema)
        rows = encode_rows(raw, fitted)
        seqs_a = build_sequences(rows, fitted, 8)
        shuffled = list(rows)
        rng.shuffle(shuffled)
        seqs_b = build_sequences(shuffled, fitted, 8)
        assert [s.entity for s in seqs_a] == [s.entity for s in seqs_b]
        for sa, sb in zip(seqs_a, seqs_b):
            assert [x.ts for x in sa.steps] == [x.ts for x in sb.steps]
            np.testing.assert_array_equal(np.array([x.nums for x in sa.steps]),
                                          np.array([x.nums for x in sb.steps]))

    def test_statics_come_from_most_recent_row(self):
        schema = make_schema([ColumnSpec("age", "static_numerical")])
        recs = rows_of(schema, [("a", 1, 30.0), ("a", 9, 31.0), ("a", 5, 99.0)])
        fitted = fit_schema(recs, schema)
        (seq,) = build_sequences(encode_rows(recs, fitted), fitted, 4)
        expected = (31.0 - fitted.means["age"]) / fitted.stds["age"]
        np.testing.assert_allclose(seq.statics[0], expected)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(0, 10 ** 6), min_size=1, max_size=40, unique=True),
       st.integers(1, 12))
def test_sequences_never_exceed_t_and_keep_max_suffix(timestamps, t):
    schema = make_schema([ColumnSpec("x", "numerical")])
    recs = rows_of(schema, [("a", ts, 0.0) for ts in timestamps])
    fitted = fit_schema(recs, schema)
    (seq,) = build_sequences(encode_rows(recs, fitted), fitted, t)
    assert len(seq.steps) <= t
    assert seq.pad_len + len(seq.steps) == t
    kept = [s.ts for s in seq.steps]
    assert kept == sorted(timestamps)[-t:]


def test_fitted_schema_json_roundtrip():
    schema = make_schema([ColumnSpec("tier", "categorical"), ColumnSpec("x", "numerical")])
    recs = rows_of(schema, [("a", 1, "g", 1.5), ("b", 2, "s", 2.5)])
    fitted = fit_schema(recs, schema)
    again = ingest.FittedSchema.from_json(fitted.to_json())
    assert again.vocab == fitted.vocab
    assert again.means == fitted.means
    assert again.stds == fitted.stds
    assert again.embed_dims == fitted.embed_dims

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedpod.cli import write_partition_csv
from fedpod.cohort import (
    PartitionTable,
    PoissonModel,
    fit_poisson,
    generate_synthetic_cohort,
    load_partition_csv,
    poisson_pmf,
    synthesize_shards,
)
from fedpod.errors import DegenerateModelError, ParseError, ValidationError


def table_from_counts(counts):
    return PartitionTable.from_sample_ids(
        {f"inst{i}": [f"inst{i}-s{k}" for k in range(c)] for i, c in enumerate(counts)}
    )


# ---------------------------------------------------------------- pmf


def test_pmf_at_zero_is_exp_minus_lambda():
    for lam in (0.5, 1.0, 7.0, 64.0):
        assert poisson_pmf(0, lam) == pytest.approx(math.exp(-lam), rel=1e-15)


def test_pmf_matches_direct_evaluation():
    assert poisson_pmf(1, 1.0) == pytest.approx(math.exp(-1), rel=1e-15)
    assert poisson_pmf(2, 1.0) == pytest.approx(math.exp(-1) * 1.0**2 / math.factorial(2), rel=1e-15)


def test_pmf_large_x_does_not_overflow():
    value = poisson_pmf(10_000, 1000.0)
    assert 0.0 <= value <= 1.0
    assert poisson_pmf(10_000, 10_000.0) > 0.0


def test_pmf_rejects_bad_inputs():
    with pytest.raises(ValidationError):
        poisson_pmf(1, 0.0)
    with pytest.raises(ValidationError):
        poisson_pmf(1, -3.0)
    with pytest.raises(ValidationError):
        poisson_pmf(-1, 1.0)


@pytest.mark.parametrize("lam", [0.5, 10.0, 300.0, 1000.0])
def test_pmf_mass_sums_to_one(lam):
    upper = math.ceil(lam + 20 * math.sqrt(lam))
    total = sum(poisson_pmf(x, lam) for x in range(upper + 1))
    assert total >= 1 - 1e-9
    assert total <= 1 + 1e-9


# ---------------------------------------------------------------- fitting


def test_fit_single_institution():
    assert fit_poisson(table_from_counts([4])).lam == 4.0


def test_fit_is_mean():
    assert fit_poisson(table_from_counts([2, 4, 6])).lam == 4.0


def test_fit_skewed_cohort():
    assert fit_poisson(table_from_counts([1, 1, 1, 97])).lam == 25.0


def test_fit_all_zero_counts_is_degenerate():
    with pytest.raises(DegenerateModelError):
        fit_poisson(table_from_counts([0, 0]))


def test_poisson_model_requires_positive_lambda():
    with pytest.raises(ValidationError):
        PoissonModel(0.0)


# ---------------------------------------------------------------- table


def test_table_validates_duplicates_and_total():
    with pytest.raises(ValidationError):
        PartitionTable.from_sample_ids({"a": ["x"], "b": ["x"]})
    with pytest.raises(ValidationError):
        PartitionTable({}, 0)


def test_table_counts_and_total():
    table = table_from_counts([3, 5])
    assert table.counts() == {"inst0": 3, "inst1": 5}
    assert table.total == 8


# ---------------------------------------------------------------- generator


def test_generator_is_deterministic():
    a_table, a_shards = generate_synthetic_cohort(6, 12.0, 1, 5.0, seed=99)
    b_table, b_shards = generate_synthetic_cohort(6, 12.0, 1, 5.0, seed=99)
    assert a_table == b_table
    for inst in a_shards:
        assert np.array_equal(a_shards[inst].features, b_shards[inst].features)


def test_generator_single_institution():
    table, shards = generate_synthetic_cohort(1, 3.0, 0, 1.0, seed=0)
    (entry,) = table.entries.values()
    assert entry.count >= 1
    assert len(shards) == 1


def test_generator_shards_align_with_table():
    table, shards = generate_synthetic_cohort(5, 8.0, 1, 4.0, seed=2)
    for inst, entry in table.entries.items():
        assert len(shards[inst]) == entry.count
        assert tuple(sorted(shards[inst].sample_ids)) == entry.sample_ids


def test_generator_rejects_bad_arguments():
    with pytest.raises(ValidationError):
        generate_synthetic_cohort(3, 5.0, 3, 2.0, seed=0)
    with pytest.raises(ValidationError):
        generate_synthetic_cohort(3, 0.0, 0, 2.0, seed=0)
    with pytest.raises(ValidationError):
        generate_synthetic_cohort(3, 5.0, 0, 0.5, seed=0)


def test_outliers_exceed_upper_bound_across_seeds():
    # Monte Carlo oracle: with scale 10, outlier draws sit far above lam + 2*sqrt(lam).
    lam, z = 30.0, 2.0
    bound = lam + z * math.sqrt(lam)
    hits = trials = 0
    for seed in range(100):
        table, _ = generate_synthetic_cohort(23, lam, 3, 10.0, seed=seed)
        counts = list(table.counts().values())
        for count in sorted(counts)[-3:]:
            trials += 1
            hits += count > bound
    assert hits / trials > 0.99


def test_generate_then_fit_round_trips_lambda():
    # With no outliers the fitted mean converges to the generating mean.
    lam = 40.0
    for seed in (0, 1, 2):
        table, _ = generate_synthetic_cohort(200, lam, 0, 1.0, seed=seed)
        fitted = fit_poisson(table).lam
        assert abs(fitted - lam) / lam < 0.05


def test_synthesize_shards_covers_every_institution():
    table = table_from_counts([4, 2, 9])
    shards = synthesize_shards(table, seed=5)
    assert set(shards) == set(table.entries)
    for inst, entry in table.entries.items():
        assert len(shards[inst]) == entry.count


# ---------------------------------------------------------------- csv


def test_load_groups_by_partition(tmp_path):
    path = tmp_path / "p.csv"
    path.write_text("Subject_ID,Partition_ID\ns1,h1\ns2,h1\n")
    table = load_partition_csv(path)
    assert table.counts() == {"h1": 2}


def test_load_rejects_empty_data(tmp_path):
    path = tmp_path / "p.csv"
    path.write_text("Subject_ID,Partition_ID\n")
    with pytest.raises(ParseError):
        load_partition_csv(path)


def test_load_rejects_bad_header(tmp_path):
    path = tmp_path / "p.csv"
    path.write_text("subject,partition\ns1,h1\n")
    with pytest.raises(ParseError) as err:
        load_partition_csv(path)
    assert err.value.line == 1


def test_load_rejects_duplicate_subject_with_line_number(tmp_path):
    path = tmp_path / "p.csv"
    path.write_text("Subject_ID,Partition_ID\ns1,h1\ns1,h2\n")
    with pytest.raises(ParseError) as err:
        load_partition_csv(path)
    assert err.value.line == 3


def test_load_rejects_malformed_rows(tmp_path):
    path = tmp_path / "p.csv"
    path.write_text("Subject_ID,Partition_ID\ns1,h1,extra\n")
    with pytest.raises(ParseError) as err:
        load_partition_csv(path)
    assert err.value.line == 2
    path.write_text("Subject_ID,Partition_ID\n,h1\n")
    with pytest.raises(ParseError):
        load_partition_csv(path)


def test_load_distribution_file_with_23_partitions(tmp_path):
    table, _ = generate_synthetic_cohort(23, 30.0, 3, 10.0, seed=1)
    path = tmp_path / "partitioning.csv"
    write_partition_csv(table, path)
    loaded = load_partition_csv(path)
    assert len(loaded.entries) == 23


ids = st.text(alphabet="abcdefgh0123456789", min_size=1, max_size=8)


@settings(max_examples=50, deadline=None)
@given(
    st.dictionaries(
        ids,
        st.sets(ids, min_size=1, max_size=6),
        min_size=1,
        max_size=5,
    )
)
def test_partition_csv_round_trip(mapping):
    # globally unique sample ids: prefix with the institution
    unique = {inst: [f"{inst}.{sid}" for sid in sids] for inst, sids in mapping.items()}
    table = PartitionTable.from_sample_ids(unique)
    import tempfile

    with tempfile.TemporaryDirectory() as tmp:
        path = f"{tmp}/t.csv"
        write_partition_csv(table, path)
        assert load_partition_csv(path) == table

"""
test_data.py — Parsing, adjacency views, serialization and splitting.
"""

import io

import numpy as np
import pytest

from minihes.data import (
    detect_delimiter,
    dump_ratings,
    parse_aligned,
    parse_ratings,
    part_sizes,
    read_aligned,
    split_dataset,
    synthetic_low_rank,
    write_ratings,
)
from minihes.errors import ConfigError, DatasetParseError


def _entry_set(data):
    return {(data.user_ids[u], data.item_ids[i], r) for u, i, r in data.iter_entries()}


# ── Parsing ───────────────────────────────────────────────────────────────────

def test_parse_two_users_one_item():
    data = parse_ratings("1,10,5.0\n2,10,3.0")
    assert data.num_users == 2
    assert data.num_items == 1
    assert data.by_item.as_lists()[0] == [(0, 5.0), (1, 3.0)]


def test_parse_double_colon_delimiter():
    data = parse_ratings("1::10::5.0", delimiter="::")
    assert len(data) == 1
    assert data.entries[0].rating == 5.0


def test_duplicate_pair_keeps_last_rating():
    data = parse_ratings("1,10,5.0\n1,10,2.0")
    assert len(data) == 1
    assert data.entries[0].rating == 2.0


def test_duplicate_pair_keeps_first_position():
    data = parse_ratings("1,10,5.0\n2,10,1.0\n1,10,2.0")
    assert [tuple(e) for e in data.entries] == [(0, 0, 2.0), (1, 0, 1.0)]


def test_comments_blank_lines_and_extra_fields_are_ignored():
    text = "# user item rating ts\n\n7\t3\t4.5\t881250949\n8\t3\t1\t881250950\n"
    data = parse_ratings(text)
    assert len(data) == 2
    assert data.user_ids == ("7", "8")
    assert data.item_ids == ("3",)


def test_ids_remapped_in_first_appearance_order():
    data = parse_ratings("u9 i5 1\nu2 i5 2\nu9 i1 3\n", delimiter="whitespace")
    assert data.user_ids == ("u9", "u2")
    assert data.item_ids == ("i5", "i1")
    assert data.user_index["u2"] == 1


@pytest.mark.parametrize(
    "line, expected",
    [("1::2::3", "::"), ("1\t2\t3", "\t"), ("1,2,3", ","), ("1 2 3", None)],
)
def test_detect_delimiter(line, expected):
    assert detect_delimiter("# header, with comma\n" + line) == expected


def test_parse_accepts_bytes_and_streams():
    assert len(parse_ratings(b"1,2,3\n")) == 1
    assert len(parse_ratings(io.BytesIO(b"1,2,3\n4,5,6\n"))) == 2


def test_malformed_line_reports_line_number():
    with pytest.raises(DatasetParseError) as exc_info:
        parse_ratings("1,10,5.0\n2,10\n")
    assert exc_info.value.line_number == 2


def test_invalid_utf8_reports_line_number():
    with pytest.raises(DatasetParseError) as exc_info:
        parse_ratings(b"1,2,3\n\xff\xfe,2,3\n")
    assert exc_info.value.line_number == 2
    with pytest.raises(DatasetParseError) as exc_info:
        parse_ratings(io.BytesIO(b"\xc3,2,3\n"))
    assert exc_info.value.line_number == 1


def test_non_numeric_rating_rejected():
    with pytest.raises(DatasetParseError):
        parse_ratings("1,10,five\n")


@pytest.mark.parametrize("rating", ["nan", "inf", "-inf"])
def test_non_finite_rating_rejected(rating):
    with pytest.raises(DatasetParseError):
        parse_ratings(f"1,10,{rating}\n")


def test_empty_input_rejected():
    with pytest.raises(DatasetParseError):
        parse_ratings("# only a comment\n\n")


# ── Adjacency ─────────────────────────────────────────────────────────────────

def test_entry_counts_match_adjacency(tiny_data):
    assert len(tiny_data) == 7
    assert int(tiny_data.by_user.degree.sum()) == 7
    assert int(tiny_data.by_item.degree.sum()) == 7


def test_adjacency_sorted_by_counterpart(tiny_data):
    for rows in (tiny_data.by_user.as_lists(), tiny_data.by_item.as_lists()):
        for neighbours in rows:
            idx = [j for j, _ in neighbours]
            assert idx == sorted(idx)
    assert tiny_data.by_user.as_lists()[0] == [(0, 5.0), (1, 3.0), (2, 2.0)]


def test_transpose_consistency(tiny_data):
    by_user = {(u, i, r) for u, row in enumerate(tiny_data.by_user.as_lists()) for i, r in row}
    by_item = {(u, i, r) for i, row in enumerate(tiny_data.by_item.as_lists()) for u, r in row}
    assert by_user == by_item == set(map(tuple, tiny_data.entries))


def test_entity_graph_uses_factor_rows(tiny_data):
    graph = tiny_data.entity_graph
    num_users = tiny_data.num_users
    assert graph.num_rows == tiny_data.num_entities
    # user rows point at item rows, item rows point at user rows
    for u in range(num_users):
        assert np.all(graph.neighbors(u)[0] >= num_users)
    for i in range(tiny_data.num_items):
        assert np.all(graph.neighbors(num_users + i)[0] < num_users)
    np.testing.assert_array_equal(graph.neighbors(0)[0], [3, 4, 5])


def test_adjacency_matches_scipy_csr(make_dataset):
    data = make_dataset([(1, 2, 4.0), (0, 1, 0.0), (1, 0, 2.5), (0, 2, 1.0)], 3, 3)
    by_user = data.by_user
    np.testing.assert_array_equal(by_user.indptr, [0, 2, 4, 4])
    np.testing.assert_array_equal(by_user.indices, [1, 2, 0, 2])
    # the zero rating stays a stored entry
    np.testing.assert_array_equal(by_user.ratings, [0.0, 1.0, 2.5, 4.0])
    assert by_user.degree.tolist() == [2, 2, 0]
    assert data.by_item.as_lists() == [[(1, 2.5)], [(0, 0.0)], [(0, 1.0), (1, 4.0)]]


def test_adjacency_rejects_duplicate_cells(make_dataset):
    data = make_dataset([(0, 0, 1.0), (0, 0, 2.0)], 1, 1)
    with pytest.raises(ValueError):
        data.by_user


def test_dataset_is_read_only(tiny_data):
    with pytest.raises(ValueError):
        tiny_data.ratings[0] = 1.0


def test_density(tiny_data):
    assert tiny_data.density == pytest.approx(7 / 12)


# ── Serialization ─────────────────────────────────────────────────────────────

def test_round_trip_preserves_entries_adjacency_and_ids(tiny_data):
    again = parse_ratings(dump_ratings(tiny_data))
    assert again.entries == tiny_data.entries
    assert again.user_ids == tiny_data.user_ids
    assert again.item_ids == tiny_data.item_ids
    assert again.by_user.as_lists() == tiny_data.by_user.as_lists()
    assert again.by_item.as_lists() == tiny_data.by_item.as_lists()


def test_dump_is_tab_separated_in_entry_order(tiny_data):
    lines = dump_ratings(tiny_data).splitlines()
    assert lines[0] == "a\tw\t5.0"
    assert len(lines) == len(tiny_data)


def test_aligned_files_share_the_entity_universe(tmp_path, tiny_data):
    train, val, test = split_dataset(tiny_data, seed=3)
    paths = []
    for name, part in (("train", train), ("val", val), ("test", test)):
        paths.append(tmp_path / f"{name}.tsv")
        write_ratings(part, paths[-1])

    loaded = read_aligned(paths)
    assert len({(d.num_users, d.num_items) for d in loaded}) == 1
    assert loaded[0].user_ids == loaded[2].user_ids
    union = set().union(*(_entry_set(d) for d in loaded))
    assert union == _entry_set(tiny_data)


def test_parse_aligned_gives_cold_entities_a_row():
    train, val = parse_aligned(["a,x,1\n", "b,y,2\n"])
    assert train.num_users == val.num_users == 2
    assert train.by_user.degree.tolist() == [1, 0]


# ── Splitting ─────────────────────────────────────────────────────────────────

def _ten_entries():
    return parse_ratings("".join(f"u{k % 4},i{k},{k % 5 + 1}\n" for k in range(10)))


def test_split_sizes_ten_entries():
    parts = split_dataset(_ten_entries(), (0.6, 0.2, 0.2), seed=7)
    assert [len(p) for p in parts] == [6, 2, 2]


def test_split_sizes_five_entries():
    data = parse_ratings("".join(f"u{k},i{k},1\n" for k in range(5)))
    parts = split_dataset(data, (0.6, 0.2, 0.2), seed=0)
    assert [len(p) for p in parts] == [3, 1, 1]


def test_part_sizes_never_empty():
    for n in range(3, 80):
        for ratios in ((0.6, 0.2, 0.2), (0.98, 0.01, 0.01), (1 / 3, 1 / 3, 1 / 3)):
            sizes = part_sizes(n, ratios)
            assert sum(sizes) == n
            assert min(sizes) >= 1


def test_split_is_deterministic():
    data = _ten_entries()
    first = split_dataset(data, seed=7)
    second = split_dataset(data, seed=7)
    for a, b in zip(first, second):
        assert a.entries == b.entries


def test_split_parts_are_disjoint_and_complete():
    data = _ten_entries()
    parts = split_dataset(data, seed=7)
    sets = [_entry_set(p) for p in parts]
    assert sets[0].isdisjoint(sets[1]) and sets[0].isdisjoint(sets[2]) and sets[1].isdisjoint(sets[2])
    assert set().union(*sets) == _entry_set(data)


def test_split_keeps_entity_universe():
    data = _ten_entries()
    for part in split_dataset(data, seed=1):
        assert (part.num_users, part.num_items) == (data.num_users, data.num_items)
        assert part.user_ids == data.user_ids


@pytest.mark.parametrize("ratios", [(0.5, 0.2, 0.2), (0.6, 0.4, 0.0), (0.7, 0.4, -0.1), (0.5, 0.5)])
def test_split_rejects_bad_ratios(ratios):
    with pytest.raises(ConfigError):
        split_dataset(_ten_entries(), ratios, seed=0)


def test_split_needs_three_entries():
    with pytest.raises(ConfigError):
        split_dataset(parse_ratings("1,1,1\n2,2,2\n"), seed=0)


def test_stratified_split_is_per_user(synthetic):
    parts = split_dataset(synthetic, seed=5, stratify=True)
    sets = [_entry_set(p) for p in parts]
    assert set().union(*sets) == _entry_set(synthetic)
    assert sum(len(s) for s in sets) == len(synthetic)

    counts = synthetic.by_user.degree
    for u in np.flatnonzero(counts >= 3):
        per_part = [int(np.count_nonzero(p.users == u)) for p in parts]
        assert per_part == part_sizes(int(counts[u]), (0.6, 0.2, 0.2))


# ── Synthetic data ────────────────────────────────────────────────────────────

def test_synthetic_shape_and_determinism():
    a = synthetic_low_rank(30, 20, rank=2, density=0.25, noise=0.0, seed=4)
    b = synthetic_low_rank(30, 20, rank=2, density=0.25, noise=0.0, seed=4)
    assert len(a) == 150
    assert a.entries == b.entries
    assert len({(u, i) for u, i, _ in a.iter_entries()}) == 150


def test_synthetic_rejects_bad_density():
    with pytest.raises(ConfigError):
        synthetic_low_rank(5, 5, density=0.0)

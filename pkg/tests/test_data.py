import numpy as np
import pytest

from comirec.data import (
    DataError,
    build_log,
    generate_synthetic,
    iter_training_samples,
    load_log,
    make_eval_cases,
    pad_batch,
    read_vocab,
    sample_at,
    split_users,
    write_vocab,
)


def _rows(user, items, start=0, cate="c"):
    return [(user, str(i), cate, start + t) for t, i in enumerate(items)]


def _dense_log(n_users, length=6, n_items=6):
    rows = []
    for u in range(n_users):
        rows += _rows(str(u), [(u + t) % n_items for t in range(length)])
    return build_log(rows)


def test_generic_csv_sorted_by_time(tmp_path):
    path = tmp_path / "log.csv"
    lines = [f"u1,i{k},c,{100 - k}" for k in range(5)]
    lines += [f"u{u},i{k},c,{k}" for u in range(2, 6) for k in range(5)]
    path.write_text("\n".join(lines) + "\n")
    log = load_log(path, "generic")
    u1 = log.user_vocab.index("u1")
    raw = [log.item_vocab[i] for i in log.sequences[u1].items]
    assert raw == ["i4", "i3", "i2", "i1", "i0"]


def test_ties_keep_input_order():
    rows = [("u", f"i{k}", "c", 7) for k in (3, 1, 4, 0, 2)]
    rows += [(v, f"i{k}", "c", 0) for v in "vwxy" for k in range(5)]
    log = build_log(rows)
    u = log.user_vocab.index("u")
    assert [log.item_vocab[i] for i in log.sequences[u].items] == ["i3", "i1", "i4", "i0", "i2"]


def test_min_count_filter_drops_short_user():
    rows = _rows("a", range(4))
    rows += _rows("b", range(5)) + _rows("c", range(5)) + _rows("d", range(5)) + _rows("e", range(5))
    rows += _rows("f", range(5))
    log = build_log(rows)
    assert "a" not in log.user_vocab
    assert len(log.sequences) == 5


def test_filter_reaches_fixed_point():
    # item "x" has 5 uses only while user "z" (4 events after losing x) stays; dropping z cascades
    rows = _rows("z", ["x", "p", "q", "r"]) + [("z", "s", "c", 9)]
    rows += [(u, "x", "c", 0) for u in "abcd"]
    for u in "abcdefg":
        rows += _rows(u, ["k1", "k2", "k3", "k4", "k5"], start=1)
    log = build_log(rows)
    users = {}
    items = {}
    for seq in log.sequences.values():
        users[seq.user_id] = len(seq)
        for i in seq.items:
            items[i] = items.get(i, 0) + 1
    assert min(users.values()) >= 5 and min(items.values()) >= 5
    assert "z" not in log.user_vocab


def test_taobao_keeps_only_clicks(tmp_path):
    path = tmp_path / "taobao.csv"
    lines = []
    for u in range(5):
        for i in range(5):
            lines.append(f"{u},{i},9,pv,{i}")
        lines.append(f"{u},100,9,buy,50")
        lines.append(f"{u},101,9,cart,51")
    path.write_text("\n".join(lines) + "\n")
    log = load_log(path, "taobao")
    assert log.item_vocab == ["0", "1", "2", "3", "4"]
    assert log.n_interactions() == 25


def test_amazon_missing_category_defaults_to_zero(tmp_path):
    path = tmp_path / "amazon.csv"
    path.write_text("".join(f"u{u},A{i},{i}\n" for u in range(5) for i in range(5)))
    log = load_log(path, "amazon")
    assert log.category_vocab == ["0"]


def test_malformed_row_names_line(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("1,2,3,4\n1,2,3\n")
    with pytest.raises(DataError, match=":2:"):
        load_log(path, "generic")


def test_empty_after_filter(tmp_path):
    path = tmp_path / "tiny.csv"
    path.write_text("1,2,3,4\n")
    with pytest.raises(DataError, match="no interactions"):
        load_log(path, "generic")


def test_vocab_roundtrip(tmp_path):
    write_vocab(["a", "b", "zz"], tmp_path / "v.csv")
    assert (tmp_path / "v.csv").read_text() == "a,0\nb,1\nzz,2\n"
    assert read_vocab(tmp_path / "v.csv") == ["a", "b", "zz"]


@pytest.mark.parametrize("n_users,expected", [(10, (8, 1, 1)), (100, (80, 10, 10))])
def test_split_proportions(n_users, expected):
    split = split_users(_dense_log(n_users), seed=3)
    sizes = (len(split.train_users), len(split.valid_users), len(split.test_users))
    assert sizes == expected


def test_split_partition_and_determinism():
    log = _dense_log(37)
    a = split_users(log, seed=11)
    b = split_users(log, seed=11)
    assert a == b
    assert a.train_users | a.valid_users | a.test_users == set(log.users)
    assert not (a.train_users & a.valid_users or a.train_users & a.test_users or a.valid_users & a.test_users)
    n = len(log.users)
    assert abs(len(a.train_users) - 0.8 * n) <= 1
    assert abs(len(a.valid_users) - 0.1 * n) <= 1


def test_sample_definition_and_truncation():
    assert sample_at(list("abcde"), 3, 20) == (["a", "b", "c"], "d")
    seq = list(range(30))
    history, target = sample_at(seq, 29, 20)
    assert history == list(range(9, 29)) and target == 29


def test_training_stream_contiguous_and_deterministic():
    log = generate_synthetic(30, 40, 4, (1, 2), (5, 30), seed=1)
    split = split_users(log, 0)
    a = iter_training_samples(log, split, n_max=7, batch_size=16, seed=5)
    b = iter_training_samples(log, split, n_max=7, batch_size=16, seed=5)
    for _ in range(5):
        ba, bb = next(a), next(b)
        assert ba == bb
        for s in ba:
            assert s.user_id in split.train_users
            assert 1 <= len(s.history) <= 7
            seq = list(log.sequences[s.user_id].items)
            window = s.history + [s.target]
            assert any(seq[i:i + len(window)] == window for i in range(len(seq)))


def test_eval_cases_split_at_floor():
    log = build_log(_rows("a", range(10)) + _rows("b", range(5)) + sum((_rows(u, range(10)) for u in "cdef"), []))
    a, b = log.user_vocab.index("a"), log.user_vocab.index("b")
    cases = {c.user_id: c for c in make_eval_cases(log, [a, b], n_max=20)}
    items_a = list(log.sequences[a].items)
    assert cases[a].observed == items_a[:8]
    assert cases[a].held_out == frozenset(items_a[8:])
    items_b = list(log.sequences[b].items)
    assert cases[b].observed == items_b[:4] and cases[b].held_out == {items_b[4]}
    short = make_eval_cases(log, [a], n_max=3)[0]
    assert short.observed == items_a[5:8]


def test_eval_case_partition_counts():
    log = generate_synthetic(20, 10, 2, (1, 2), (5, 40), seed=2)
    for case in make_eval_cases(log, log.users, n_max=1000):
        seq = list(log.sequences[case.user_id].items)
        cut = len(case.observed)
        assert cut + len(seq[cut:]) == len(seq)
        assert case.held_out == set(seq[cut:])


def test_synthetic_single_cluster_user():
    log = generate_synthetic(3, 20, 4, (1, 2), (10, 10), seed=0, user_clusters={0: [0]})
    cats = log.sequences[log.user_vocab.index("0")].categories
    assert len(cats) == 10 and set(log.category_vocab[c] for c in cats) == {"0"}


def test_synthetic_even_clusters_and_determinism():
    a = generate_synthetic(400, 500, 5, (2, 4), (20, 50), seed=9)
    b = generate_synthetic(400, 500, 5, (2, 4), (20, 50), seed=9)
    assert a.item_vocab == b.item_vocab
    assert all(np.array_equal(a.sequences[u].items, b.sequences[u].items) for u in a.users)
    assert a.n_items == 500
    counts = np.bincount(a.item_category)
    assert counts.tolist() == [100] * 5
    # cluster c owns items [100c, 100c + 100)
    assert all(int(a.category_vocab[a.item_category[i]]) == int(a.item_vocab[i]) // 100 for i in range(500))


@pytest.mark.parametrize("kwargs", [
    dict(n_clusters=1), dict(interests_per_user_range=(3, 2)), dict(seq_len_range=(0, 4)),
    dict(interests_per_user_range=(1, 9)),
])
def test_synthetic_rejects_bad_ranges(kwargs):
    args = dict(n_users=5, n_items=20, n_clusters=4, interests_per_user_range=(1, 2),
                seq_len_range=(5, 6), seed=0)
    args.update(kwargs)
    with pytest.raises(ValueError):
        generate_synthetic(**args)


def test_pad_batch_left_aligned():
    ids, mask = pad_batch([[3, 4], [1, 2, 3, 4, 5, 6]], 4)
    assert ids.tolist() == [[3, 4, 0, 0], [3, 4, 5, 6]]
    assert mask.tolist() == [[True, True, False, False], [True] * 4]

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mstree.datagen import gen_auctions, gen_kmeans_truth
from mstree.ingest import (AUCTION_FLAT, CHOICE_LONG, IngestError, RowFilter, detect_format,
                           export, export_text, ingest)

TOY = """session_id,option_id,ctx_age,ctx_country,price,stars,chosen
s1,10,34,US,120.5,3,0
s1,11,34,US,89.0,4,1
s1,12,34,US,240.0,5,0
s2,10,51,DE,99.0,2,0
s2,13,51,DE,150.0,4,0
"""


def write(tmp_path, text, name="data.csv"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return str(path)


def test_toy_choice_file(tmp_path):
    data = ingest(write(tmp_path, TOY))
    assert len(data) == 2 and data.kind == "choice"
    assert data.schema.names == ["ctx_age", "ctx_country"]
    assert data.schema[1].categories == ("DE", "US")
    assert data.contexts.tolist() == [[34.0, 1.0], [51.0, 0.0]]
    p = data.payload
    assert p.n_options.tolist() == [3, 2]
    assert p.choices.tolist() == [2, 0]  # second session is a no-purchase
    assert p.features[0, 1].tolist() == [89.0, 4.0]
    assert p.option_ids.tolist() == [[10, 11, 12], [10, 13, -1]]
    assert data.extra["feature_names"] == ["price", "stars"]
    assert data.extra["session_ids"] == ["s1", "s2"]


def test_round_trip_unchanged(tmp_path):
    path = write(tmp_path, TOY)
    a = ingest(path)
    out = str(tmp_path / "again.csv")
    export(a, out)
    b = ingest(out)
    assert a.schema == b.schema
    assert np.array_equal(a.contexts, b.contexts)
    for field in ("features", "n_options", "choices", "option_ids"):
        assert np.array_equal(getattr(a.payload, field), getattr(b.payload, field))
    assert export_text(a) == export_text(b)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 1000))
def test_round_trip_generated(tmp_path_factory, seed):
    tmp = tmp_path_factory.mktemp("rt")
    for data in (gen_kmeans_truth(seed, 60)[0], gen_auctions(seed, 60)[0]):
        path = str(tmp / "d.csv")
        export(data, path)
        # categories are sorted on first read; a known schema keeps the codes
        fresh = ingest(path)
        labels = [[fresh.schema.decode_value(j, v) for j, v in enumerate(r)] for r in fresh.contexts]
        assert labels == [[data.schema.decode_value(j, v) for j, v in enumerate(r)]
                          for r in data.contexts]
        back = ingest(path, schema=data.schema) if data.kind == "auction" else fresh
        assert np.array_equal(back.contexts, data.contexts)
        assert np.array_equal(back.latent, data.latent) if data.latent is not None else True
        if data.kind == "choice":
            assert np.array_equal(back.payload.features, data.payload.features)
            assert np.array_equal(back.payload.choices, data.payload.choices)
        else:
            assert back.schema == data.schema
            assert np.array_equal(back.payload.bids, data.payload.bids)
            assert np.array_equal(back.payload.wins, data.payload.wins)


def test_price_filter_removes_outlier(tmp_path):
    text = TOY + "s3,14,28,US,19000000,5,0\ns3,15,28,US,130,3,1\n"
    data = ingest(write(tmp_path, text), filters=["price<=4000"])
    assert len(data) == 3
    assert data.payload.n_options.tolist() == [3, 2, 1]
    assert data.payload.features[2, 0, 0] == 130.0
    assert data.payload.choices[2] == 1
    assert np.all(data.payload.features[:, :, 0] <= 4000)
    # a session whose chosen option is filtered out is dropped
    text = TOY + "s3,14,28,US,19000000,5,1\ns3,15,28,US,130,3,0\n"
    assert len(ingest(write(tmp_path, text), filters=["price<=4000"])) == 2
    assert len(ingest(write(tmp_path, text), filters=["price ≤ 4000"])) == 2


def test_row_filter_parse():
    f = RowFilter.parse("price<=4000")
    assert f.keep(4000) and not f.keep(4000.01)
    assert RowFilter.parse("x > 1").keep(2)
    with pytest.raises(ValueError):
        RowFilter.parse("price ~ 4")


def test_auction_flat(tmp_path):
    text = "site,size,bid,win\nnews,300,0.5,0\nsport,250,1.25,1\nnews,300,2,1\n"
    path = write(tmp_path, text)
    assert detect_format(path) == AUCTION_FLAT
    data = ingest(path, categorical=["size"])
    assert data.kind == "auction" and len(data) == 3
    assert data.schema[0].categories == ("news", "sport")
    assert data.schema[1].categories == ("250", "300")
    assert data.payload.bids.tolist() == [0.5, 1.25, 2.0]
    assert detect_format(write(tmp_path, TOY, "c.csv")) == CHOICE_LONG


@pytest.mark.parametrize("text, line", [
    (TOY.replace("s1,12,34,US", "s1,12,35,US"), 4),
    (TOY.replace("s1,12,34,US,240.0,5,0", "s1,12,34,US,240.0,5,1"), 4),
    (TOY.replace("120.5", "cheap"), 2),
    (TOY.replace("120.5", "inf"), 2),
    (TOY.replace("89.0,4,1", "89.0,4,2"), 3),
    (TOY.replace("s2,13,51,DE,150.0,4,0", "s2,13,,DE,150.0,4,0"), 6),
    (TOY.replace("s2,13,51,DE,150.0,4,0", "s2,13,51,DE,150.0,0"), 6),
])
def test_structural_errors_name_the_line(tmp_path, text, line):
    with pytest.raises(IngestError, match=f"line {line}"):
        ingest(write(tmp_path, text))


def test_auction_errors(tmp_path):
    with pytest.raises(IngestError, match="line 3"):
        ingest(write(tmp_path, "a,bid,win\n1,0.5,0\n2,high,1\n"))
    with pytest.raises(IngestError, match="line 2"):
        ingest(write(tmp_path, "a,bid,win\n1,0.5,yes\n"))
    with pytest.raises(IngestError):
        ingest(write(tmp_path, "a,b,c\n1,2,3\n"))
    with pytest.raises(IngestError):
        ingest(write(tmp_path, "a,bid,win\n1,0.5,0\n"), filters=["price<=3"])

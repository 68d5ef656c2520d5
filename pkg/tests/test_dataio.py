import json

import numpy as np
import pytest

from vaecontrib.baselines import train_ae
from vaecontrib.dataio import (
    DataError,
    EmptyInputError,
    ModelFileError,
    canonical_json,
    fit_transform,
    load_csv,
    load_model,
    load_schema,
    save_model,
    table_from_array,
    transform,
    write_attribution_report,
)
from vaecontrib.numcore import Rng
from vaecontrib.vae import VaeConfig, anomaly_score


def _write(tmp_path, text, name="data.csv"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


def test_numeric_csv(tmp_path):
    raw = load_csv(_write(tmp_path, "a,b\n1,2\n3,4\n5,6\n"))
    assert raw.names == ["a", "b"] and raw.n_rows == 3
    np.testing.assert_array_equal(raw.values["b"], [2, 4, 6])


def test_symbolic_column(tmp_path):
    raw = load_csv(_write(tmp_path, "proto,x\ntcp,1\nudp,2\nicmp,3\ntcp,4\n"))
    assert raw.kinds["proto"] == "symbolic"
    assert raw.categories("proto") == ["tcp", "udp", "icmp"]


@pytest.mark.parametrize("text", ["", "a,b\n"])
def test_empty_input(tmp_path, text):
    with pytest.raises(EmptyInputError):
        load_csv(_write(tmp_path, text))


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_csv(tmp_path / "nope.csv")


def test_ragged_rows_report_line(tmp_path):
    with pytest.raises(DataError, match=r"\[3\]"):
        load_csv(_write(tmp_path, "a,b\n1,2\n3\n"))


def test_bad_numeric_cell_with_schema(tmp_path):
    p = _write(tmp_path, "a,b\n1,2\nx,4\n")
    with pytest.raises(DataError, match=r"\[3\]"):
        load_csv(p, {"a": "numeric"})
    with pytest.raises(DataError):
        load_csv(_write(tmp_path, "a\n1\n\n2\n,\n", "e.csv"), {"a": "numeric"})


def test_schema_roles(tmp_path):
    p = _write(tmp_path, "id,x,y,label\n1,0.5,a,normal\n2,1.5,b,attack\n")
    sp = _write(tmp_path, json.dumps({"id": "ignore", "label": "label", "y": "symbolic"}), "s.json")
    raw = load_csv(p, load_schema(sp))
    assert raw.names == ["x", "y"]
    assert raw.labels == ["normal", "attack"]
    with pytest.raises(DataError):
        load_schema(_write(tmp_path, json.dumps({"x": "weird"}), "bad.json"))


def test_standardisation_closed_form():
    ds, stats = fit_transform(table_from_array(np.array([[1.0], [2.0], [3.0]])))
    np.testing.assert_allclose(ds.matrix[:, 0], [-1.2247449, 0.0, 1.2247449], atol=1e-7)
    assert stats.columns[0].mean == 2.0
    assert stats.columns[0].std == pytest.approx(0.8164966, abs=1e-7)
    test = transform(table_from_array(np.array([[4.0]])), stats)
    assert test.matrix[0, 0] == pytest.approx(2.4494897, abs=1e-7)


def test_constant_column_centred_only():
    ds, stats = fit_transform(table_from_array(np.array([[5.0, 1.0], [5.0, 2.0], [5.0, 4.0]])))
    np.testing.assert_array_equal(ds.matrix[:, 0], 0.0)
    assert stats.columns[0].constant and stats.columns[0].std == 1.0
    assert ds.eligible_dims == [1]


def test_standardised_moments():
    x = np.random.default_rng(0).normal(3.0, 2.0, (100, 4))
    ds, _ = fit_transform(table_from_array(x))
    assert np.all(np.abs(ds.matrix.mean(0)) < 1e-9)
    np.testing.assert_allclose(ds.matrix.std(0), 1.0, atol=1e-12)


def test_one_hot_groups(tmp_path):
    raw = load_csv(_write(tmp_path, "x,proto,flag\n1,tcp,S\n2,udp,F\n3,icmp,S\n"))
    ds, stats = fit_transform(raw)
    names = [c.name for c in stats.columns]
    assert names == ["x", "proto=tcp", "proto=udp", "proto=icmp", "flag=S", "flag=F"]
    np.testing.assert_array_equal(ds.matrix[:, 1:4].sum(1), 1.0)
    np.testing.assert_array_equal(ds.matrix[:, 4:6].sum(1), 1.0)
    assert ds.eligible_dims == [0]


def test_transform_reproduces_fit(tmp_path):
    raw = load_csv(_write(tmp_path, "x,proto\n1.5,tcp\n-2,udp\n3.25,tcp\n"))
    ds, stats = fit_transform(raw)
    np.testing.assert_array_equal(transform(raw, stats).matrix, ds.matrix)


def test_unseen_category_warns(tmp_path):
    _, stats = fit_transform(load_csv(_write(tmp_path, "x,p\n1,a\n2,b\n")))
    with pytest.warns(UserWarning, match="unseen"):
        ds = transform(load_csv(_write(tmp_path, "x,p\n1,c\n2,a\n", "t.csv")), stats)
    assert ds.unseen_categories == 1
    np.testing.assert_array_equal(ds.matrix[0, 1:], 0.0)


def test_column_mismatch(tmp_path):
    _, stats = fit_transform(load_csv(_write(tmp_path, "x,y\n1,2\n3,4\n")))
    with pytest.raises(DataError):
        transform(load_csv(_write(tmp_path, "x,z\n1,2\n", "t.csv")), stats)


def test_canonical_json():
    assert canonical_json({"b": 0.1, "a": [1, True, None]}) == '{"a":[1,true,null],"b":0.10000000000000001}'
    v = np.random.default_rng(1).standard_normal(50)
    assert np.array_equal(np.array(json.loads(canonical_json(v))), v)


def test_vae_round_trip_byte_identical(toy_vae, toy_split, tmp_path):
    _, stats = fit_transform(table_from_array(toy_split[0]))
    a = save_model(toy_vae, tmp_path / "a.json", stats)
    model, stats2, _ = load_model(a)
    b = save_model(model, tmp_path / "b.json", stats2)
    assert a.read_bytes() == b.read_bytes()
    x = toy_split[1]
    np.testing.assert_array_equal(anomaly_score(toy_vae, x, Rng(3), 1), anomaly_score(model, x, Rng(3), 1))
    assert model.gamma == toy_vae.gamma and model.beta == toy_vae.beta
    assert model.detect_threshold == toy_vae.detect_threshold


def test_ae_round_trip(toy_split, tmp_path):
    ae, _ = train_ae(toy_split[0][:200], Rng(0), VaeConfig(activation="relu", epochs=2))
    a = save_model(ae, tmp_path / "ae.json")
    back, stats, _ = load_model(a)
    assert stats is None
    np.testing.assert_array_equal(back.reconstruct(toy_split[1]), ae.reconstruct(toy_split[1]))
    assert save_model(back, tmp_path / "ae2.json").read_bytes() == a.read_bytes()


def test_corrupt_model_files(toy_vae, tmp_path):
    good = save_model(toy_vae, tmp_path / "m.json").read_text()
    bad = tmp_path / "bad.json"
    bad.write_text(good[: len(good) // 2])
    with pytest.raises(ModelFileError):
        load_model(bad)
    doc = json.loads(good)
    doc["schema_version"] = 99
    bad.write_text(json.dumps(doc))
    with pytest.raises(ModelFileError, match="schema_version"):
        load_model(bad)
    del doc["encoder"]
    doc["schema_version"] = 1
    bad.write_text(json.dumps(doc))
    with pytest.raises(ModelFileError):
        load_model(bad)


def test_attribution_report(tmp_path):
    recs = [{"point_id": 0, "anomaly_score": 50.5, "detected": True, "status": "attributed",
             "psi": [1, 3], "contribution_degrees": [0.1, 4.0, -0.2, -5.0], "final_k": 2, "converged": True},
            {"point_id": 1, "anomaly_score": 10.0, "detected": False, "status": "skipped",
             "psi": [], "contribution_degrees": None, "final_k": None, "converged": None}]
    write_attribution_report(recs, tmp_path / "r.json", tmp_path / "r.csv", ["a", "b", "c", "d"])
    assert json.loads((tmp_path / "r.json").read_text())[0]["psi"] == [1, 3]
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0].split(",")[:7] == ["point_id", "anomaly_score", "detected", "status", "final_k",
                                      "converged", "psi"]
    assert lines[1].split(",")[6] == "1;3"
    assert lines[2].split(",")[3] == "skipped"

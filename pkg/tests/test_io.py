import json

import numpy as np
import pytest

from fedflex import io as fio
from fedflex.objectives import LogisticObjective, random_quadratic_federation
from fedflex.participation import ParticipationModel as PM
from fedflex.trainer import TrainingConfig, run_training


class TestFederationFiles:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        fed = random_quadratic_federation(3, 2, rng, sigma=0.2)
        fed = fed.with_client(LogisticObjective(rng.normal(size=(5, 3)), rng.integers(0, 2, 5), 0.1, 2), 7.0)
        fio.write_federation(tmp_path / "f.json", fed)
        back = fio.read_federation(tmp_path / "f.json")
        w = rng.normal(size=3)
        assert back.value(w) == pytest.approx(fed.value(w), rel=1e-14)
        np.testing.assert_array_equal(back.n_samples, fed.n_samples)

    def test_generator_block(self):
        d = {"generator": {"kind": "random_quadratic", "dim": 2, "n_clients": 3, "seed": 4, "spread": 2.0}}
        a, b = fio.federation_from_dict(d), fio.federation_from_dict(d)
        np.testing.assert_array_equal(a.w_star, b.w_star)
        assert a.size == 3

    def test_unknown_version(self, tmp_path):
        (tmp_path / "f.json").write_text(json.dumps({"version": "fedflex-federation v9", "clients": []}))
        with pytest.raises(fio.FormatError):
            fio.read_federation(tmp_path / "f.json")


class TestTraceFiles:
    def test_roundtrip(self, tmp_path):
        fio.write_trace(tmp_path / "t.trace", [0.5, 1.0, 0.25], 4)
        x, E = fio.read_trace(tmp_path / "t.trace")
        np.testing.assert_array_equal(x, [0.5, 1.0, 0.25])
        assert E == 4
        assert (tmp_path / "t.trace").read_text().startswith("# fedflex-trace v1 E=4 mean=")

    def test_rejects_other_versions(self, tmp_path):
        (tmp_path / "t.trace").write_text("# fedflex-trace v2 E=4 mean=0.5 stdev=0\n0.5\n")
        with pytest.raises(fio.FormatError):
            fio.read_trace(tmp_path / "t.trace")

    def test_rejects_bad_fraction(self, tmp_path):
        (tmp_path / "t.trace").write_text("# fedflex-trace v1 E=4 mean=0.5 stdev=0\n1.5\n")
        with pytest.raises(fio.FormatError):
            fio.read_trace(tmp_path / "t.trace")


class TestMetrics:
    def test_roundtrip(self, tmp_path):
        fed = random_quadratic_federation(2, 3, np.random.default_rng(1), sigma=0.1)
        recs = run_training(fed, TrainingConfig(E=2, T=5, scheme="A"), [PM.bernoulli(0.5, 2)] * 3)
        rows = [r.row() for r in recs]
        fio.write_metrics(tmp_path / "m.csv", rows)
        assert fio.read_metrics(tmp_path / "m.csv") == rows

    def test_rejects_unknown_version(self, tmp_path):
        (tmp_path / "m.csv").write_text("# fedflex-metrics v0\nround\n")
        with pytest.raises(fio.FormatError):
            fio.read_metrics(tmp_path / "m.csv")


class TestConfig:
    def base(self, **kw):
        d = {
            "version": fio.CONFIG_VERSION,
            "E": 3,
            "T": 5,
            "federation": {"generator": {"dim": 2, "n_clients": 3, "seed": 0}},
            "participation": {"all": {"kind": "bernoulli_epochs", "q": 0.5}},
            "schemes": ["B", "C"],
            "seeds": [1, 2],
        }
        d.update(kw)
        return d

    def test_minimal(self):
        spec = fio.spec_from_dict(self.base())
        assert spec.participation == [PM.bernoulli(0.5, 3)] * 3 and spec.T == 5

    def test_trace_names_and_groups(self):
        spec = fio.spec_from_dict(self.base(participation={"groups": [
            {"model": "T30", "count": 2}, {"model": {"kind": "always_full"}, "count": 1}]}))
        assert spec.participation[0].kind == "fraction_trace"
        assert spec.participation[2] == PM.always_full(3)

    def test_empty_seeds(self):
        with pytest.raises(ValueError):
            fio.spec_from_dict(self.base(seeds=[]))

    def test_participation_count(self):
        with pytest.raises(ValueError):
            fio.spec_from_dict(self.base(participation=[{"kind": "always_full"}]))

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            fio.spec_from_dict(self.base(federation="nope.json"), base=tmp_path)

    def test_membership_script(self, tmp_path):
        script = {"version": fio.MEMBERSHIP_VERSION, "events": [
            {"round": 2, "kind": "departure", "client": 1, "policy": "include"},
            {"round": 3, "kind": "arrival", "client": {"type": "quadratic", "A": [[1.0, 0], [0, 1.0]], "b": [1.0, 1.0]},
             "n_samples": 10, "fast_reboot_delta0": 2.0},
        ]}
        (tmp_path / "m.json").write_text(json.dumps(script))
        spec = fio.spec_from_dict(self.base(membership="m.json"), base=tmp_path)
        assert [e.kind for e in spec.membership] == ["departure", "arrival"]
        assert spec.membership[1].fast_reboot_delta0 == 2.0

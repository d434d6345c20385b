import csv

import numpy as np
import pytest

from spiketransfer import analysis, snn

ARCH = "4C3-AP2-FC8-FC"


def build(seed):
    return snn.build_network(ARCH, (2, 8, 8), 2, 2, seed=seed)


def probe(rng, n=12):
    return rng.poisson(0.4, size=(n, 2, 2, 8, 8)).astype(float)


class TestHeatmap:
    def test_self_comparison_unit_diagonal(self, rng):
        net = build(1)
        result = analysis.cka_heatmap(net, net, probe(rng))
        np.testing.assert_allclose(np.diag(result.matrix), 1.0, atol=1e-9)

    def test_values_in_unit_interval(self, rng):
        result = analysis.cka_heatmap(build(1), build(2), probe(rng))
        assert result.matrix.min() >= -1e-9
        assert result.matrix.max() <= 1.0 + 1e-9

    def test_cross_model_below_self(self, rng):
        p = probe(rng, 16)
        a, b = build(1), build(2)
        cross = analysis.cka_heatmap(a, b, p)
        self_a = analysis.cka_heatmap(a, a, p)
        assert np.diag(cross.matrix).mean() < np.diag(self_a.matrix).mean()

    def test_tap_subset(self, rng):
        taps = snn.layer_names(build(1))[:2]
        result = analysis.cka_heatmap(build(1), build(1), probe(rng), taps=taps)
        assert result.row_layers == taps and result.matrix.shape == (2, 2)

    def test_unknown_tap(self, rng):
        with pytest.raises(analysis.LayerTapInvalid):
            analysis.cka_heatmap(build(1), build(1), probe(rng),
                                 taps=["conv99"])

    def test_mismatched_architectures(self, rng):
        other = snn.build_network("4C3-AP2-FC", (2, 8, 8), 2, 2, seed=3)
        with pytest.raises(analysis.LayerTapInvalid):
            analysis.cka_heatmap(build(1), other, probe(rng))


class TestHistogram:
    def test_count_conservation(self, rng):
        net = build(1)
        name = snn.layer_names(net)[0]
        x = probe(rng, n=6)
        result = analysis.membrane_histogram(net, x, name, bins=20)
        trace = snn.network_forward(net, x, head="t", record_layers=True)
        per_sample = trace.layer_mp[0].shape[1]
        # every membrane value over samples and timesteps lands in one bin
        assert result.counts.sum() == 6 * 2 * per_sample

    def test_constant_input_single_bin(self):
        net = build(1)
        name = snn.layer_names(net)[-1]
        x = np.zeros((3, 2, 2, 8, 8))
        result = analysis.membrane_histogram(net, x, name, bins=10)
        assert (result.counts > 0).sum() == 1

    def test_edges_monotone(self, rng):
        net = build(1)
        result = analysis.membrane_histogram(net, probe(rng),
                                             snn.layer_names(net)[1], bins=15)
        assert len(result.edges) == 16
        assert (np.diff(result.edges) > 0).all()

    def test_bad_layer_and_bins(self, rng):
        net = build(1)
        with pytest.raises(analysis.LayerTapInvalid):
            analysis.membrane_histogram(net, probe(rng), "nope")
        with pytest.raises(analysis.LayerTapInvalid):
            analysis.membrane_histogram(net, probe(rng),
                                        snn.layer_names(net)[0], bins=1)

    def test_forward_purity(self, rng):
        net = build(1)
        x = probe(rng)
        name = snn.layer_names(net)[0]
        a = analysis.membrane_histogram(net, x, name)
        b = analysis.membrane_histogram(net, x, name)
        np.testing.assert_array_equal(a.counts, b.counts)
        np.testing.assert_array_equal(a.edges, b.edges)


class TestCsvExport:
    def test_heatmap_round_trip(self, rng, tmp_path):
        result = analysis.cka_heatmap(build(1), build(2), probe(rng))
        path = tmp_path / "h.csv"
        analysis.export_csv(result, path)
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0][1:] == result.col_layers
        parsed = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
        np.testing.assert_array_equal(parsed, result.matrix)

    def test_histogram_round_trip(self, rng, tmp_path):
        net = build(1)
        result = analysis.membrane_histogram(net, probe(rng),
                                             snn.layer_names(net)[0], bins=8)
        path = tmp_path / "m.csv"
        analysis.export_csv(result, path)
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["bin_start", "bin_end", "count"]
        assert len(rows) == 9
        counts = np.array([int(r[2]) for r in rows[1:]])
        np.testing.assert_array_equal(counts, result.counts)
        starts = np.array([float(r[0]) for r in rows[1:]])
        np.testing.assert_array_equal(starts, result.edges[:-1])

    def test_byte_determinism(self, rng, tmp_path):
        x = probe(rng)
        blobs = []
        for name in ("a.csv", "b.csv"):
            result = analysis.cka_heatmap(build(1), build(2), x)
            analysis.export_csv(result, tmp_path / name)
            blobs.append((tmp_path / name).read_bytes())
        assert blobs[0] == blobs[1]


class TestRender:
    def test_figures_written(self, rng, tmp_path):
        net = build(1)
        hm = analysis.cka_heatmap(net, build(2), probe(rng))
        hist = analysis.membrane_histogram(net, probe(rng),
                                           snn.layer_names(net)[0])
        p1, p2 = tmp_path / "hm.png", tmp_path / "hist.png"
        analysis.render_heatmap(hm, p1)
        analysis.render_histogram(hist, p2)
        assert p1.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
        assert p2.stat().st_size > 0

    def test_training_curves(self, tmp_path):
        rows = [{"epoch": e, "train_loss_all": 1.0 / (e + 1),
                 "train_loss_cls_s": 0.5 / (e + 1),
                 "train_loss_kt": 0.2 / (e + 1), "test_acc": 0.5}
                for e in range(4)]
        path = tmp_path / "curves.png"
        analysis.render_training_curves(rows, path)
        assert path.stat().st_size > 0

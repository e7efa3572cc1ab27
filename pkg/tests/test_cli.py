"""End-to-end command-line pipeline on tiny datasets."""

import numpy as np
import pytest

from lrpae.cli import EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main


def run(*argv):
    return main(list(argv))


def write_cfg(path, text):
    path.write_text(text)
    return str(path)


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def tab_data(work):
    cfg = write_cfg(work / "gen.cfg", "kind = tabular\nn_train = 400\nn_val = 50\nn_test = 80\n")
    out = work / "data"
    assert run("gen-data", "--config", cfg, "--seed", "5", "--out", str(out)) == EXIT_OK
    return out


@pytest.fixture(scope="module")
def tab_model(work, tab_data):
    cfg = write_cfg(
        work / "train.cfg",
        f"dataset = {tab_data}\narch = mlp\nhidden_sizes = 12,6\n"
        "epochs = 25\nlearning_rate = 0.1\nbatch_size = 32\n",
    )
    out = work / "model"
    assert run("train", "--config", cfg, "--seed", "3", "--out", str(out)) == EXIT_OK
    return out / "model.bin"


@pytest.fixture(scope="module")
def img_data(work):
    cfg = write_cfg(
        work / "genimg.cfg",
        "kind = images\nsize = 64\nn_train = 4\nn_val = 2\nn_test_per_kind = 2\n",
    )
    out = work / "imgdata"
    assert run("gen-data", "--config", cfg, "--seed", "2", "--out", str(out)) == EXIT_OK
    return out


@pytest.fixture(scope="module")
def img_model(work, img_data):
    cfg = write_cfg(
        work / "trainimg.cfg",
        f"dataset = {img_data}\narch = conv\nscale = desk\n"
        "epochs = 1\nlearning_rate = 0.01\nbatch_size = 2\n",
    )
    out = work / "imgmodel"
    assert run("train", "--config", cfg, "--seed", "1", "--out", str(out)) == EXIT_OK
    return out / "model.bin"


class TestGenData:
    def test_outputs_exist(self, tab_data):
        for name in ("manifest.json", "train.f32", "val.f32", "test.f32", "manifest.txt"):
            assert (tab_data / name).is_file()

    def test_byte_reproducible(self, work, tab_data):
        cfg = write_cfg(work / "gen2.cfg",
                        "kind = tabular\nn_train = 400\nn_val = 50\nn_test = 80\n")
        out = work / "data_again"
        assert run("gen-data", "--config", cfg, "--seed", "5", "--out", str(out)) == EXIT_OK
        for name in ("manifest.json", "train.f32", "val.f32", "test.f32"):
            assert (out / name).read_bytes() == (tab_data / name).read_bytes()

    def test_manifest_echoes_config(self, tab_data):
        text = (tab_data / "manifest.txt").read_text()
        assert "command = gen-data" in text
        assert "seed = 5" in text
        assert "n_train = 400" in text


class TestTrain:
    def test_model_file_written(self, tab_model):
        assert tab_model.is_file()
        assert tab_model.read_bytes().startswith(b"LRPAE")

    def test_training_deterministic(self, work, tab_data, tab_model):
        cfg = write_cfg(
            work / "train2.cfg",
            f"dataset = {tab_data}\narch = mlp\nhidden_sizes = 12,6\n"
            "epochs = 25\nlearning_rate = 0.1\nbatch_size = 32\n",
        )
        out = work / "model_again"
        assert run("train", "--config", cfg, "--seed", "3", "--out", str(out)) == EXIT_OK
        assert (out / "model.bin").read_bytes() == tab_model.read_bytes()

    @pytest.mark.filterwarnings("ignore:overflow", "ignore:invalid value")
    def test_divergent_training_exits_3(self, work, tab_data, capsys):
        cfg = write_cfg(
            work / "boom.cfg",
            f"dataset = {tab_data}\narch = mlp\nepochs = 5\nlearning_rate = 1e9\n",
        )
        code = run("train", "--config", cfg, "--out", str(work / "boom"))
        assert code == EXIT_NUMERIC
        assert "numeric failure" in capsys.readouterr().err


class TestExplain:
    def test_tabular_csv(self, work, tab_data, tab_model):
        cfg = write_cfg(work / "exp.cfg",
                        f"dataset = {tab_data}\nmodel = {tab_model}\nsample_index = 3\n")
        out = work / "exp"
        assert run("explain", "--config", cfg, "--out", str(out)) == EXIT_OK
        lines = (out / "explanation.csv").read_text().splitlines()
        assert lines[0] == "feature_index,relevance"
        assert len(lines) == 1 + 21
        rel = np.array([float(l.split(",")[1]) for l in lines[1:]])
        assert np.all(rel >= 0)

    def test_image_heatmap(self, work, img_data, img_model):
        cfg = write_cfg(work / "expimg.cfg",
                        f"dataset = {img_data}\nmodel = {img_model}\nsplit = blob\n")
        out = work / "expimg"
        assert run("explain", "--config", cfg, "--out", str(out)) == EXIT_OK
        assert (out / "explanation.pgm").read_bytes().startswith(b"P5")
        raw = (out / "explanation.f32").read_bytes()
        assert len(raw) == 64 * 64 * 4


@pytest.fixture(scope="module")
def result(work, tab_data, tab_model):
    cfg = write_cfg(
        work / "val.cfg",
        f"dataset = {tab_data}\nmodel = {tab_model}\nstrategy = random\n"
        "K = 5\nT = 0.0\nshap_nsamples = 100\nshap_background = 10\n",
    )
    out = work / "validate"
    assert run("validate", "--config", cfg, "--seed", "11", "--out", str(out)) == EXIT_OK
    return out


class TestValidate:
    def test_recall_csv_schema(self, result):
        lines = (result / "recall.csv").read_text().splitlines()
        assert lines[0] == "method,m,recall,n_plus,n_minus"
        methods = {l.split(",")[0] for l in lines[1:]}
        assert methods == {"lrp-l1", "lrp-l2", "residual-l1", "residual-l2", "shap"}
        assert len(lines) == 1 + 5 * 21

    def test_counts_consistent(self, result):
        for line in (result / "recall.csv").read_text().splitlines()[1:]:
            _, m, recall, n_plus, n_minus = line.split(",")
            assert int(n_plus) + int(n_minus) == 5
            assert float(recall) == pytest.approx(int(n_plus) / 5)

    def test_recall_reaches_one(self, result):
        last = [l for l in (result / "recall.csv").read_text().splitlines()[1:]
                if l.split(",")[1] == "21"]
        assert all(float(l.split(",")[2]) == 1.0 for l in last)

    def test_svg_written(self, result):
        text = (result / "recall.svg").read_text()
        assert text.startswith("<svg") and "polyline" in text


class TestEvalImages:
    def test_ap_csv_and_heatmaps(self, work, img_data, img_model):
        cfg = write_cfg(work / "eval.cfg", f"dataset = {img_data}\nmodel = {img_model}\n")
        out = work / "eval"
        assert run("eval-images", "--config", cfg, "--out", str(out)) == EXIT_OK
        lines = (out / "ap.csv").read_text().splitlines()
        assert lines[0] == "damage,method,ap"
        assert len(lines) == 1 + 3 * 4  # three damage kinds, four methods
        for line in lines[1:]:
            damage, method, ap = line.split(",")
            assert damage in ("blob", "scratch", "misplace")
            assert 0.0 <= float(ap) <= 1.0
        pgms = list((out / "heatmaps").glob("*.pgm"))
        assert len(pgms) == 3 * 4 * 2  # kinds x methods x images


class TestBench:
    def test_schema(self, work, tab_data, tab_model):
        cfg = write_cfg(
            work / "bench.cfg",
            f"dataset = {tab_data}\nmodel = {tab_model}\nbench_samples = 3\n"
            "shap_nsamples = 100\nshap_background = 10\n",
        )
        out = work / "bench"
        assert run("bench", "--config", cfg, "--out", str(out)) == EXIT_OK
        lines = (out / "bench.csv").read_text().splitlines()
        assert lines[0] == "method,mean_ms,p50_ms,p95_ms"
        methods = [l.split(",")[0] for l in lines[1:]]
        assert methods == ["residual", "lrp", "shap"]
        for line in lines[1:]:
            assert all(float(v) >= 0 for v in line.split(",")[1:])


class TestErrors:
    def test_missing_config_file(self, work, capsys):
        assert run("gen-data", "--config", str(work / "nope.cfg")) == EXIT_USAGE
        assert "error" in capsys.readouterr().err

    def test_unknown_config_key(self, work, capsys):
        cfg = write_cfg(work / "badkey.cfg", "frobnicate = 3\n")
        assert run("gen-data", "--config", cfg) == EXIT_USAGE
        assert "unknown config key" in capsys.readouterr().err

    def test_malformed_line(self, work):
        cfg = write_cfg(work / "badline.cfg", "just some words\n")
        assert run("gen-data", "--config", cfg) == EXIT_USAGE

    def test_bad_kind(self, work):
        cfg = write_cfg(work / "badkind.cfg", "kind = audio\n")
        assert run("gen-data", "--config", cfg, "--out", str(work / "x")) == EXIT_USAGE

    def test_unknown_command(self, work):
        cfg = write_cfg(work / "any.cfg", "")
        assert run("frob", "--config", cfg) == EXIT_USAGE

    def test_missing_model(self, work, tab_data):
        cfg = write_cfg(work / "nomodel.cfg", f"dataset = {tab_data}\n")
        assert run("explain", "--config", cfg, "--out", str(work / "y")) == EXIT_USAGE

    def test_missing_dataset(self, work, tab_model):
        cfg = write_cfg(work / "noda.cfg",
                        f"dataset = {work / 'absent'}\nmodel = {tab_model}\n")
        assert run("explain", "--config", cfg, "--out", str(work / "z")) == EXIT_USAGE

    def test_comments_and_blank_lines_ok(self, work):
        cfg = write_cfg(work / "comments.cfg",
                        "# a comment\n\nkind = tabular  # trailing\n"
                        "n_train = 10\nn_val = 5\nn_test = 5\n")
        assert run("gen-data", "--config", cfg, "--out", str(work / "c")) == EXIT_OK

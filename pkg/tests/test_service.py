"""HTTP service: endpoint contracts over a tiny generated dataset."""

import json

import pytest
from fastapi.testclient import TestClient

from genner.service import create_app

CONFIG_INI = """\
[data]
types = 2
lexicon = 12
ambiguous_fraction = 0.5
context_vocab = 12
two_token_fraction = 0.25
missing_image_fraction = 0.2
noise_sigma = 0.05
patches = 3
patch_dim = 4
max_tokens = 10
train = 48
dev = 16
test = 16
seed = 0

[model]
d = 16
h = 2
layers = 2
max_len = 10

[train]
epochs = 2
batch_size = 8
lr = 0.003
alpha = 0.01
seed = 0
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """One generated dataset and one trained run shared by every test."""
    root = tmp_path_factory.mktemp("svc")
    cfg = root / "run.ini"
    cfg.write_text(CONFIG_INI)
    client = TestClient(create_app())
    r = client.post("/data/generate", json={"out_dir": str(root / "data"),
                                            "config": str(cfg)})
    assert r.status_code == 200, r.text
    r = client.post("/train", json={"data_dir": str(root / "data"),
                                    "out_dir": str(root / "run"),
                                    "config": str(cfg)})
    assert r.status_code == 200, r.text
    return {"root": root, "client": client, "config": str(cfg),
            "data": str(root / "data"),
            "ckpt": str(root / "run" / "best.ckpt"),
            "train_resp": r.json()}


def test_health(workspace):
    r = workspace["client"].get("/health")
    assert r.status_code == 200
    body = r.json()
    assert body["status"] == "ok"
    assert isinstance(body["version"], str)


def test_generate_data_reports_corpus_facts(workspace):
    stats = json.loads((workspace["root"] / "data" / "stats.json").read_text())
    assert stats["sizes"] == {"train": 48, "dev": 16, "test": 16}
    assert set(stats["text_only_ceiling"]) == {"train", "dev", "test"}
    assert all(0.0 < v <= 1.0 for v in stats["text_only_ceiling"].values())
    assert stats["labels"][0] == "O"
    for name in ("schema.json", "train.jsonl", "dev.jsonl", "test.jsonl"):
        assert (workspace["root"] / "data" / name).exists()


def test_generate_data_is_deterministic(workspace, tmp_path):
    client = workspace["client"]
    for sub in ("a", "b"):
        r = client.post("/data/generate", json={"out_dir": str(tmp_path / sub),
                                                "config": workspace["config"]})
        assert r.status_code == 200
    for name in ("schema.json", "train.jsonl", "test.jsonl"):
        assert ((tmp_path / "a" / name).read_bytes()
                == (tmp_path / "b" / name).read_bytes())


def test_generate_data_seed_override_changes_corpus(workspace, tmp_path):
    r = workspace["client"].post(
        "/data/generate", json={"out_dir": str(tmp_path / "s7"),
                                "config": workspace["config"], "seed": 7})
    assert r.status_code == 200
    assert r.json()["seed"] == 7
    base = (workspace["root"] / "data" / "train.jsonl").read_bytes()
    assert (tmp_path / "s7" / "train.jsonl").read_bytes() != base


def test_generate_data_rejects_bad_config(workspace, tmp_path):
    bad = tmp_path / "bad.ini"
    bad.write_text("[data]\nlexicn = 12\n")
    r = workspace["client"].post(
        "/data/generate", json={"out_dir": str(tmp_path / "x"),
                                "config": str(bad)})
    assert r.status_code == 400
    assert "lexicn" in r.json()["detail"]


def test_train_summary_shape(workspace):
    body = workspace["train_resp"]
    assert body["best_epoch"] in (0, 1)  # epochs are 0-indexed
    assert 0.0 <= body["best_dev_f1"] <= 1.0
    assert body["total_steps"] == 12  # ceil(48/8) x 2 epochs
    assert len(body["history"]) == 2
    assert set(body["checkpoints"]) == {"last", "best"}
    assert body["config"]["d"] == 16


def test_train_missing_split_is_400(workspace, tmp_path):
    r = workspace["client"].post("/train", json={"data_dir": str(tmp_path),
                                                 "out_dir": str(tmp_path / "o")})
    assert r.status_code == 400


def test_eval_metrics_shape(workspace):
    r = workspace["client"].post("/eval", json={"checkpoint": workspace["ckpt"],
                                                "data_dir": workspace["data"],
                                                "split": "dev"})
    assert r.status_code == 200
    body = r.json()
    assert set(body["overall"]) == {"p", "r", "f1"}
    assert 0.0 <= body["overall"]["f1"] <= 1.0
    assert set(body["per_type"]) == {"PER", "LOC"}


def test_eval_unknown_split_is_400(workspace):
    r = workspace["client"].post("/eval", json={"checkpoint": workspace["ckpt"],
                                                "data_dir": workspace["data"],
                                                "split": "nope"})
    assert r.status_code == 400
    assert "nope" in r.json()["detail"]


def test_infer_tags_sentences(workspace):
    sentences = [["a", "b", "c"], ["d"]]
    r = workspace["client"].post("/infer", json={"checkpoint": workspace["ckpt"],
                                                 "sentences": sentences})
    assert r.status_code == 200
    out = r.json()["sentences"]
    assert [s["tokens"] for s in out] == sentences
    labels = {"O", "B-PER", "I-PER", "B-LOC", "I-LOC"}
    assert all(lab in labels for s in out for lab in s["labels"])
    assert [len(s["labels"]) for s in out] == [3, 1]


def test_infer_missing_checkpoint_is_400(workspace, tmp_path):
    r = workspace["client"].post("/infer",
                                 json={"checkpoint": str(tmp_path / "no.ckpt"),
                                       "sentences": [["a"]]})
    assert r.status_code == 400


def test_infer_empty_sentence_list_is_422(workspace):
    r = workspace["client"].post("/infer", json={"checkpoint": workspace["ckpt"],
                                                 "sentences": []})
    assert r.status_code == 422  # schema-level validation


def test_inspect_masks_structure(workspace):
    r = workspace["client"].post("/inspect/masks",
                                 json={"checkpoint": workspace["ckpt"],
                                       "data_dir": workspace["data"],
                                       "split": "test", "index": 1})
    assert r.status_code == 200
    body = r.json()
    assert body["index"] == 1
    assert body["tokens"][0] == "[CLS]" and body["tokens"][-1] == "[SEP]"
    assert len(body["tags"]) == len(body["tokens"]) - 2
    assert len(body["layers"]) == 2
    layer = body["layers"][0]
    assert len(layer["text_keep"]) == len(body["tokens"])
    assert len(layer["text_keep_probs"]) == len(body["tokens"])
    assert all(k in (0, 1) for k in layer["text_keep"])
    if body["has_image"]:
        assert len(layer["patch_keep"]) == 3
    else:
        assert layer["patch_keep"] is None


def test_inspect_masks_bad_index_is_400(workspace):
    r = workspace["client"].post("/inspect/masks",
                                 json={"checkpoint": workspace["ckpt"],
                                       "data_dir": workspace["data"],
                                       "split": "test", "index": 9000})
    assert r.status_code == 400
    assert "out of range" in r.json()["detail"]


def test_similarity_scores(workspace):
    # find an imaged example to query
    lines = (workspace["root"] / "data" / "test.jsonl").read_text().splitlines()
    idx = next(i for i, line in enumerate(lines)
               if json.loads(line)["has_image"])
    r = workspace["client"].post("/inspect/similarity",
                                 json={"checkpoint": workspace["ckpt"],
                                       "data_dir": workspace["data"],
                                       "split": "test", "index": idx, "k": 3})
    assert r.status_code == 200
    body = r.json()
    assert -1.0 <= body["paired_score"] <= 1.0
    assert len(body["mismatched"]) == 3
    assert isinstance(body["preferred"], bool)
    assert all(m["index"] != idx for m in body["mismatched"])


def test_similarity_imageless_example_is_400(workspace):
    lines = (workspace["root"] / "data" / "test.jsonl").read_text().splitlines()
    idx = next((i for i, line in enumerate(lines)
                if not json.loads(line)["has_image"]), None)
    if idx is None:
        pytest.skip("every test example carries an image at this seed")
    r = workspace["client"].post("/inspect/similarity",
                                 json={"checkpoint": workspace["ckpt"],
                                       "data_dir": workspace["data"],
                                       "split": "test", "index": idx})
    assert r.status_code == 400
    assert "no paired image" in r.json()["detail"]


def test_similarity_too_many_distractors_is_400(workspace):
    r = workspace["client"].post("/inspect/similarity",
                                 json={"checkpoint": workspace["ckpt"],
                                       "data_dir": workspace["data"],
                                       "split": "test", "index": 0, "k": 9000})
    assert r.status_code == 400


def test_gradcheck_rejects_bad_trials(workspace):
    r = workspace["client"].post("/gradcheck", json={"trials": 0})
    assert r.status_code == 400

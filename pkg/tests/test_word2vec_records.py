import numpy as np
import pytest

from tbm.errors import EmptyCorpus, SchemaMismatch
from tbm.records import (
    ExcavationRecord,
    GeologyRecord,
    Phase,
    parse_range,
    read_excavation_csv,
    read_geology_csv,
    write_excavation_csv,
    write_geology_csv,
)
from tbm.word2vec import TextEmbedding, embed_category, train_word2vec


def cosine(a, b):
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def test_w2v_shape():
    emb = train_word2vec([["soft", "loose"]] * 3, dim=8, epochs=5, seed=0)
    assert emb.vectors.shape == (2, 8)
    assert set(emb.vocab) == {"soft", "loose"}


def test_w2v_cooccurrence_ordering():
    corpus = [["clay", "soft"]] * 20 + [["sand", "dense"]] * 20
    emb = train_word2vec(corpus, dim=8, epochs=50, seed=3)
    v, ix = emb.vectors, emb.vocab
    assert cosine(v[ix["clay"]], v[ix["soft"]]) > cosine(v[ix["clay"]], v[ix["sand"]])


def test_w2v_deterministic():
    corpus = [["a", "b", "c"], ["c", "d"]] * 4
    a = train_word2vec(corpus, dim=4, epochs=10, seed=9)
    b = train_word2vec(corpus, dim=4, epochs=10, seed=9)
    assert a.vectors.tobytes() == b.vectors.tobytes()


def test_w2v_empty_corpus():
    with pytest.raises(EmptyCorpus):
        train_word2vec([], dim=4)
    with pytest.raises(EmptyCorpus):
        train_word2vec([[], []], dim=4)


def test_embed_category():
    emb = TextEmbedding({"soft": 0, "plastic": 1}, np.array([[1.0, 3.0], [3.0, 5.0]]))
    np.testing.assert_array_equal(embed_category("Soft", emb), [1.0, 3.0])
    np.testing.assert_array_equal(embed_category("hard rock", emb), [0.0, 0.0])
    np.testing.assert_array_equal(embed_category("soft plastic", emb), [2.0, 4.0])


def test_embedding_dict_roundtrip():
    emb = TextEmbedding({"b": 1, "a": 0}, np.array([[0.25, 1.0], [2.0, -1.0]]))
    back = TextEmbedding.from_dict(emb.to_dict())
    assert back.vocab == emb.vocab and back.vectors.tobytes() == emb.vectors.tobytes()


@pytest.mark.parametrize("text, expected", [("0.36 to 0.51", (0.36, 0.51)), ("0.4", (0.4, 0.4)), ("1-2", (1.0, 2.0))])
def test_parse_range(text, expected):
    assert parse_range(text) == expected


def test_geology_invariants():
    with pytest.raises(ValueError):
        GeologyRecord(1, "a", "b", 1.0, 0.1, 1, 1, 0.5, 0.6, 0.5, 1.0)
    with pytest.raises(ValueError):
        GeologyRecord(1, "a", "b", 1.0, 0.1, 1, 1, 1.5, 0.5, 0.6, 1.0)


def test_csv_roundtrip(tmp_path):
    geos = [GeologyRecord(1, "Soft plastic", "Loose", 27.8, 0.0115740740740741, 5, 3, 0.0087, 0.36, 0.51, 9.8)]
    rows = [
        ExcavationRecord(0, 1, 3.82, 1.5, 2080.6, 40784.81, 322.0, 680.0, 65.93, 9488.69, Phase.RISING),
        ExcavationRecord(1, 1, float("nan"), 1.5, 2080.6, 40784.81, 322.0, 680.0, 65.93, 1 / 3, Phase.STABLE),
    ]
    write_geology_csv(tmp_path / "g.csv", geos)
    write_excavation_csv(tmp_path / "e.csv", rows)
    assert read_geology_csv(tmp_path / "g.csv") == geos
    back = read_excavation_csv(tmp_path / "e.csv")
    assert back[0] == rows[0]
    assert np.isnan(back[1].propulsion_speed) and back[1].propulsion_thrust == 1 / 3


def test_csv_schema_mismatch(tmp_path):
    p = tmp_path / "g.csv"
    p.write_text("ring,plasticity\n1,soft\n")
    with pytest.raises(SchemaMismatch) as err:
        read_geology_csv(p)
    assert err.value.column == "density"

"""Smoke test for the ragsweep extension module. Runs offline on the toy data."""

import pathlib
import sys
import tempfile

import ragsweep

ROOT = pathlib.Path(__file__).resolve().parent.parent
TOY = ROOT / "data" / "toy"


def main():
    corpus = ragsweep.Corpus.load(str(TOY / "corpus.jsonl"))
    assert len(corpus) == 35, len(corpus)
    assert corpus.get("lighthouses#1")["doc_id"] == "lighthouses"

    chunked = ragsweep.Corpus.ingest(str(TOY / "docs"), chunk_size=40, overlap=8)
    assert len(chunked) == len(corpus)

    bm25 = ragsweep.Bm25(corpus)
    hits = bm25.search("Fresnel lens", top_k=5)
    assert len(hits) == 5 and hits[0][1] >= hits[-1][1]

    lex = [("a", 3.0), ("b", 2.0), ("c", 1.0)]
    sem = [("c", 0.9), ("a", 0.5)]
    rrf = ragsweep.fuse_rrf(lex, sem, eta=60.0, top_k=3)
    assert [i for i, _ in rrf] == ["a", "c", "b"], rrf
    cc = ragsweep.fuse_convex(lex, sem, alpha=0.7, normalization="minmax", top_k=3)
    assert {i for i, _ in cc} == {"a", "b", "c"}

    assert ragsweep.context_precision([True, False, True]) == (1.0 + 2 / 3) / 2
    assert ragsweep.rouge_l("the red fox", "the red fox") == 1.0
    assert 0.0 <= ragsweep.meteor("a red fox", "the red fox") <= 1.0
    agg = ragsweep.aggregate_generation([{"rouge": 0.2, "meteor": 0.4}, {"rouge": 0.6, "meteor": 0.1}])
    assert agg == [0.5, 0.5], agg
    assert ragsweep.select([{"context_precision": 0.3}, {"context_precision": 0.8}], ["context_precision"]) == 1

    nodes, evaluations = ragsweep.plan(str(ROOT / "configs" / "toy.toml"))
    assert evaluations == sum(len(labels) for _, labels in nodes)

    with tempfile.TemporaryDirectory() as out:
        summary = ragsweep.optimize(str(ROOT / "configs" / "toy.toml"), out, mock_llm=True, workers=2)
        assert summary["module_evaluations"] == evaluations
        pipeline = ragsweep.Pipeline.load(str(pathlib.Path(out) / "best_pipeline.toml"), mock_llm=True)
        answer, ids = pipeline.answer("Who invented the Fresnel lens?")
        assert answer and ids

    try:
        ragsweep.fuse_convex(lex, sem, normalization="zscore")
    except ValueError:
        pass
    else:
        raise AssertionError("bad normalization accepted")

    print("smoke test ok:", ", ".join(n["winner"] for n in summary["nodes"]))
    return 0


if __name__ == "__main__":
    sys.exit(main())

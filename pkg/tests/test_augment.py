import itertools
import json
import logging

import httpx
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from longtail_crs.augment import (STATES, TRANSITIONS, AugmentConfig, AugmentTarget, Candidate,
                                  GenerationError, HttpChatClient, JudgeVerdict, MockChatClient, MockJudge,
                                  ReviewError, ReviewQueue, ScriptedJudge, build_prompt, collect_votes,
                                  generate, generation_count, integrate, judge_and_route, parse_transcript,
                                  prompt_hash, resolve_review, route, run_pipeline, similarity_filter,
                                  write_augmented)
from longtail_crs.corpus import Corpus, CorpusError, Dialogue
from longtail_crs.embed import HashedEmbedder, SemanticVector
from longtail_crs.errors import ConfigError

CFG = AugmentConfig()


def dlg(did, text="SEEKER: hi", mentions=("m",)):
    return Dialogue.from_turns(did, parse_transcript(text), set(mentions))


def cand(movie="m", index=0, text="SEEKER: hi\nRECOMMENDER: watch it", tier="tail", sim=0.1):
    c = Candidate(movie, tier, "h", index, text, 0.7)
    c.sim_to_prototype = sim
    return c


def test_prompt_contains_examples_and_title():
    p = build_prompt(dlg("p", "SEEKER: any horror?"), [dlg("n1", "A: x"), dlg("n2", "B: y")], "Alien (1979)")
    assert "SEEKER: any horror?" in p and "A: x" in p and "B: y" in p
    assert "recommends the movie Alien (1979)" in p
    assert "Related conversation 4" not in build_prompt(dlg("p"), [dlg(f"n{i}") for i in range(5)], "T")
    assert prompt_hash(p) == prompt_hash(p) and len(prompt_hash(p)) == 16


def test_parse_transcript():
    assert parse_transcript("SEEKER: hi\n\nRECOMMENDER: try it") == [("SEEKER", "hi"), ("RECOMMENDER", "try it")]
    with pytest.raises(CorpusError):
        parse_transcript("no speaker here")
    with pytest.raises(CorpusError):
        parse_transcript("  \n")


def test_generation_counts_in_tier_range():
    for m in map(str, range(50)):
        assert 8 <= generation_count(m, "tail", CFG) <= 10
        assert 4 <= generation_count(m, "body", CFG) <= 5
    with pytest.raises(ValueError):
        generation_count("m", "head", CFG)


def test_mock_client_is_deterministic_and_parseable():
    prompt = build_prompt(dlg("p"), [], "Heat")
    a = generate(prompt, "m", "tail", CFG, MockChatClient())
    b = generate(prompt, "m", "tail", CFG, MockChatClient())
    assert [c.text for c in a] == [c.text for c in b]
    assert len({c.text for c in a}) == len(a)
    for c in a:
        assert "Heat" in c.text and parse_transcript(c.text)


class TableEmbedder:
    def __init__(self, table):
        self.table = table

    def embed_text(self, text):
        return SemanticVector(np.array(self.table[text], float))


def test_similarity_filter_boundary():
    # integer vectors with integer norms make both cosines exact: 17/20 and 43/50
    emb = TableEmbedder({"at": [17, 9, 5, 2, 1], "above": [43, 25, 5, 1, 0], "low": [0, 1, 0, 0, 0]})
    proto = SemanticVector(np.array([1.0, 0, 0, 0, 0]))
    cs = [Candidate("m", "tail", "h", i, t, 0.7) for i, t in enumerate(["at", "above", "low"])]
    kept, dropped = similarity_filter(cs, proto, emb, 0.85)
    assert [c.text for c in kept] == ["at", "low"] and [c.text for c in dropped] == ["above"]
    assert kept[0].sim_to_prototype == 0.85 and dropped[0].sim_to_prototype == 0.86
    assert dropped[0].state == "filtered_out"


def test_route_table():
    assert [route(k, CFG) for k in range(6)] == ["discarded"] * 2 + ["in_review"] * 2 + ["accepted"] * 2
    with pytest.raises(ValueError):
        route(6, CFG)


def test_every_vote_pattern_routes_by_pass_count(tmp_path):
    queue = ReviewQueue(tmp_path / "q.jsonl")
    for n, pattern in enumerate(itertools.product([True, False, None], repeat=5)):
        c = cand(index=n)
        judges = [ScriptedJudge(f"j{i}", {c.candidate_id: a}) for i, a in enumerate(pattern)]
        judge_and_route(c, judges, CFG, queue)
        passes = sum(a is True for a in pattern)
        assert c.pass_count == passes
        assert c.state == route(passes, CFG)
        assert (c.candidate_id in queue.entries) == (2 <= passes <= 3)


def test_judge_failure_counts_as_fail():
    c = cand()
    votes = collect_votes(c, [ScriptedJudge("a", {c.candidate_id: None})])
    assert votes[0].error and not votes[0].passed


def test_judge_and_route_preconditions():
    c = Candidate("m", "tail", "h", 0, "x", 0.7)
    with pytest.raises(ValueError):
        judge_and_route(c, [MockJudge(str(i)) for i in range(5)], CFG)
    with pytest.raises(ConfigError):
        judge_and_route(cand(), [MockJudge("a")], CFG)


def test_verdict_validation():
    assert JudgeVerdict("a", (0.5, 0.9, 1.0)).passed
    assert not JudgeVerdict("a", (0.49, 0.9, 1.0)).passed
    with pytest.raises(ValueError):
        JudgeVerdict("a", (1.2, 0, 0))


@given(st.lists(st.sampled_from(STATES), max_size=6))
def test_candidate_state_machine(path):
    c = cand()
    for nxt in path:
        legal = nxt in TRANSITIONS.get(c.state, ())
        if legal:
            c.move_to(nxt)
            assert c.state == nxt
        else:
            before = c.state
            with pytest.raises(ValueError):
                c.move_to(nxt)
            assert c.state == before


def review_candidate(queue, index=0, passes=3):
    c = cand(index=index)
    judges = [ScriptedJudge(f"j{i}", {c.candidate_id: i < passes}) for i in range(5)]
    return judge_and_route(c, judges, CFG, queue)


def test_review_queue_roundtrip(tmp_path):
    path = tmp_path / "q.jsonl"
    q = ReviewQueue(path, clock=lambda: "T")
    review_candidate(q, 0)
    review_candidate(q, 1, passes=2)
    assert [e.candidate_id for e in ReviewQueue(path).pending()] == ["m-000", "m-001"]
    before = path.read_text()
    c = resolve_review(path, "m-000", "approved")
    assert c.state == "accepted"
    # resolutions are appended, earlier rows stay untouched
    after = path.read_text()
    assert after.startswith(before) and len(after.splitlines()) == 3
    q2 = ReviewQueue(path)
    assert [x.candidate_id for x in q2.approved()] == ["m-000"]
    assert [e.candidate_id for e in q2.pending()] == ["m-001"]
    with pytest.raises(ReviewError):
        q2.resolve("m-000", "rejected")
    with pytest.raises(ReviewError):
        q2.resolve("nope", "approved")
    with pytest.raises(ReviewError):
        q2.resolve("m-001", "maybe")
    assert q2.resolve("m-001", "rejected").state == "discarded"


def test_review_queue_rejects_out_of_band(tmp_path):
    q = ReviewQueue(tmp_path / "q.jsonl")
    c = cand()
    c.votes = [JudgeVerdict("a", (1, 1, 1))] * 5
    with pytest.raises(ReviewError):
        q.add(c)


def original_corpus(n):
    return Corpus([dlg(f"o{i:03d}") for i in range(n)], {"m": "M", "t": "T"})


def accepted(i, passes=4, movie="t"):
    c = cand(movie=movie, index=i)
    c.votes = [JudgeVerdict(str(j), (1, 1, 1) if j < passes else (0, 0, 0)) for j in range(5)]
    c.move_to("accepted")
    return c


def test_integration_cap_example():
    cands = [accepted(i, passes=5 if i % 2 else 4) for i in range(40)]
    new, rep = integrate(cands, original_corpus(100), 0.3)
    assert len(new) == 130 and rep.cap == 30 and len(rep.dropped_by_cap) == 10
    assert all(int(cid.split("-")[1]) % 2 == 0 for cid in rep.dropped_by_cap)
    assert sum(d.origin == "augmented_tail" for d in new.dialogues) == 30


def test_integration_skips_bad_candidates():
    bad = accepted(0)
    bad.text = "not a transcript"
    stranger = accepted(1, movie="zzz")
    new, rep = integrate([bad, stranger, accepted(2)], original_corpus(10), 0.3)
    assert rep.added == ["aug-t-002"] and len(rep.skipped) == 2
    with pytest.raises(ValueError):
        integrate([cand()], original_corpus(10))


@given(st.integers(0, 60), st.integers(0, 200), st.floats(0, 1))
def test_integration_never_exceeds_cap(n_acc, n_orig, rho):
    new, rep = integrate([accepted(i) for i in range(n_acc)], original_corpus(n_orig), rho)
    assert len(new) - n_orig == len(rep.added) <= rho * n_orig + 1e-9
    assert len(rep.added) == min(n_acc, rep.cap)


def pipeline_inputs():
    corpus = Corpus([dlg("p1", "SEEKER: i like scary films\nRECOMMENDER: try it", ("t",)),
                     dlg("p2", "SEEKER: funny please\nRECOMMENDER: sure", ("b",))]
                    + [dlg(f"o{i}", f"SEEKER: chat {i}", ("m",)) for i in range(20)],
                    {"t": "Tail Film", "b": "Body Film", "m": "Head Film"})
    emb = HashedEmbedder().fit(d.text for d in corpus.dialogues)
    by = corpus.by_id()
    targets = [AugmentTarget("t", "tail", "Tail Film", by["p1"], emb.embed_text(by["p1"].text), [by["o1"]]),
               AugmentTarget("b", "body", "Body Film", by["p2"], emb.embed_text(by["p2"].text), [])]
    return corpus, emb, targets


def run_once(tmp_path, name):
    corpus, emb, targets = pipeline_inputs()
    cfg = AugmentConfig(seed=3, rho=1.0)
    queue = ReviewQueue(tmp_path / f"{name}.queue.jsonl", cfg, clock=lambda: "T")
    res = run_pipeline(targets, corpus, cfg, MockChatClient(), [MockJudge(f"j{i}") for i in range(5)], emb, queue)
    write_augmented(res.corpus, tmp_path / f"{name}.jsonl")
    return res, (tmp_path / f"{name}.jsonl").read_bytes(), (tmp_path / f"{name}.queue.jsonl")


def test_pipeline_is_byte_deterministic(tmp_path):
    r1, out1, q1 = run_once(tmp_path, "a")
    r2, out2, q2 = run_once(tmp_path, "b")
    assert out1 == out2
    assert [c.to_json() for c in r1.candidates] == [c.to_json() for c in r2.candidates]
    assert (q1.read_bytes() if q1.exists() else b"") == (q2.read_bytes() if q2.exists() else b"")
    counts = r1.counts()
    assert sum(counts.values()) == len(r1.candidates) > 0
    assert counts["accepted"] == len(r1.report.added)


def test_pipeline_records_generation_errors(tmp_path):
    class Broken:
        def generate(self, prompt, temperature, index):
            raise GenerationError("down")

    corpus, emb, targets = pipeline_inputs()
    res = run_pipeline(targets, corpus, CFG, Broken(), [MockJudge(str(i)) for i in range(5)], emb)
    assert set(res.errors) == {"t", "b"} and res.candidates == [] and len(res.corpus) == len(corpus)


# ---- HTTP client --------------------------------------------------------


def chat_ok(text="SEEKER: hi"):
    return httpx.Response(200, json={"choices": [{"message": {"content": text}}]})


def scripted_client(responses, seen=None):
    it = iter(responses)

    def handler(request):
        if seen is not None:
            seen.append(request)
        r = next(it)
        if isinstance(r, Exception):
            raise r
        return r

    return httpx.Client(transport=httpx.MockTransport(handler))


def test_http_retries_then_succeeds():
    sleeps, seen = [], []
    client = scripted_client([httpx.Response(503), httpx.ConnectError("boom"), chat_ok("done")], seen)
    c = HttpChatClient("http://x/chat", "model", api_key="k", client=client, sleep=sleeps.append)
    assert c.generate("hello", 0.7, 2) == "done"
    assert sleeps == [0.5, 1.0]
    body = json.loads(seen[0].read())
    assert body["temperature"] == 0.7 and body["seed"] == 2 and body["messages"][0]["content"] == "hello"
    assert seen[0].headers["authorization"] == "Bearer k"


def test_http_gives_up_after_retries():
    sleeps = []
    client = scripted_client([httpx.Response(500)] * 4)
    c = HttpChatClient("http://x", "m", api_key="k", client=client, sleep=sleeps.append)
    with pytest.raises(GenerationError, match="4 attempts"):
        c.chat("p", 0.0)
    assert sleeps == [0.5, 1.0, 2.0]


def test_http_client_error_is_not_retried_and_key_is_redacted(caplog):
    caplog.set_level(logging.DEBUG)
    client = scripted_client([httpx.Response(401, text="bad key sk-123")])
    c = HttpChatClient("http://x", "m", api_key="sk-123", client=client, sleep=lambda s: None)
    with pytest.raises(GenerationError) as exc:
        c.chat("p", 0.0)
    assert "sk-123" not in str(exc.value) and "***" in str(exc.value)
    assert "sk-123" not in caplog.text


def test_http_malformed_response():
    c = HttpChatClient("http://x", "m", api_key="k", client=scripted_client([httpx.Response(200, json={})]))
    with pytest.raises(GenerationError, match="malformed"):
        c.chat("p", 0.0)


def test_http_missing_key(monkeypatch):
    monkeypatch.delenv("LUMI_API_KEY", raising=False)
    with pytest.raises(ConfigError, match="LUMI_API_KEY"):
        HttpChatClient("http://x", "m")


def test_config_validation():
    with pytest.raises(ConfigError):
        AugmentConfig(review_min=4, accept_min=4)
    with pytest.raises(ConfigError):
        AugmentConfig(rho=1.5)
    with pytest.raises(ConfigError):
        AugmentConfig(tail_count_range=(5, 2))

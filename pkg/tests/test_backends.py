import httpx
import numpy as np
import pytest
from fastapi.testclient import TestClient

from icl_dynamics import assemble
from icl_dynamics.backends import RemoteBackend, RemoteConfig, bayes_predict
from icl_dynamics.errors import (
    PermanentBackendError,
    ProtocolError,
    RetryableBackendError,
)
from icl_dynamics.service import create_app
from icl_dynamics.tokenalign import resolve_label_tokens

from conftest import make_bayesian_lm, make_echo_lm, posterior_identity


class TestBayesPredict:
    def test_empty_context_symmetric_prior(self):
        p = bayes_predict([], query_feature=0, prior_identity=0.5, noise=0.1)
        assert np.allclose(p, [0.5, 0.5])

    def test_one_consistent_example(self):
        # posterior 0.9 for identity, predictive 0.9*0.9 + 0.1*0.1 = 0.82
        p = bayes_predict([(0, 0)], query_feature=0, prior_identity=0.5, noise=0.1)
        assert p[0] == pytest.approx(0.82, abs=1e-12)
        assert posterior_identity(1, 0, 0.5, 0.1) == pytest.approx(0.9, abs=1e-12)

    def test_conflicting_examples_cancel(self):
        p = bayes_predict([(0, 0), (1, 0)], query_feature=1, prior_identity=0.5, noise=0.1)
        assert np.allclose(p, [0.5, 0.5])

    def test_biased_prior_zero_shot(self):
        p = bayes_predict([], query_feature=0, prior_identity=0.9, noise=0.1)
        assert p[0] == pytest.approx(0.9 * 0.9 + 0.1 * 0.1, abs=1e-12)


class TestReferenceBackends:
    def test_prefix_purity(self, sentiment_dataset, single_template, bayes_lm):
        order = [0, 1, 2, 3]
        labels = [sentiment_dataset.examples[i][1] for i in order]
        asm = assemble(sentiment_dataset, order, labels, single_template)
        tokens = bayes_lm.tokenize(asm.text)
        lmap = resolve_label_tokens(bayes_lm, single_template, sentiment_dataset.class_names)
        ids = list(lmap.first_token_ids)
        for pos in range(1, len(tokens)):
            full = bayes_lm.logprobs(tokens, [pos], ids)
            truncated = bayes_lm.logprobs(tokens[:pos], [pos], ids)
            assert np.array_equal(full, truncated)

    def test_repeated_calls_identical(self, sentiment_dataset, single_template, echo_lm):
        order = [0, 1]
        labels = [sentiment_dataset.examples[i][1] for i in order]
        asm = assemble(sentiment_dataset, order, labels, single_template)
        tokens = echo_lm.tokenize(asm.text)
        lmap = resolve_label_tokens(echo_lm, single_template, sentiment_dataset.class_names)
        a = echo_lm.logprobs(tokens, [5, 12], list(lmap.first_token_ids))
        b = echo_lm.logprobs(tokens, [5, 12], list(lmap.first_token_ids))
        assert np.array_equal(a, b)

    def test_template_tokens_after_label_are_certain(self, sentiment_dataset, single_template, echo_lm):
        order = [0, 1]
        labels = [sentiment_dataset.examples[i][1] for i in order]
        asm = assemble(sentiment_dataset, order, labels, single_template)
        tokens = echo_lm.tokenize(asm.text)
        lmap = resolve_label_tokens(echo_lm, single_template, sentiment_dataset.class_names)
        label_pos = len(echo_lm.tokenize(asm.text[: asm.segments[0].label_start - 1]))
        newline_id = echo_lm.tokenize("\n")[0]
        # the separator right after a completed label is structurally forced
        after_label = echo_lm.logprobs(tokens, [label_pos + 1], [newline_id])
        assert after_label[0, 0] == 0.0
        # while label tokens there carry no mass
        dead = echo_lm.logprobs(tokens, [label_pos + 1], list(lmap.first_token_ids))
        assert np.all(np.isinf(dead))

    def test_all_logprobs_nonpositive(self, sentiment_dataset, single_template, bayes_lm):
        order = [0, 1, 2]
        labels = [sentiment_dataset.examples[i][1] for i in order]
        asm = assemble(sentiment_dataset, order, labels, single_template)
        tokens = bayes_lm.tokenize(asm.text)
        out = bayes_lm.logprobs(tokens, list(range(len(tokens) + 1)), tokens[:3])
        assert np.nanmax(out) <= 0.0

    def test_position_out_of_range(self, bayes_lm):
        with pytest.raises(PermanentBackendError):
            bayes_lm.logprobs([1, 2, 3], [4], [1])
        with pytest.raises(PermanentBackendError):
            bayes_lm.logprobs([1, 2, 3], [-1], [1])

    def test_token_limit_enforced(self, sentiment_dataset, single_template, sentiment_tokenizer):
        lm = make_bayesian_lm(sentiment_dataset, single_template, sentiment_tokenizer, token_limit=8)
        with pytest.raises(PermanentBackendError):
            lm.logprobs(list(range(9)), [0], [1])

    def test_echo_emits_fixed_distribution(self, sentiment_dataset, single_template, sentiment_tokenizer):
        lm = make_echo_lm(sentiment_dataset, single_template, sentiment_tokenizer, emit_probs=(0.75, 0.25))
        order = [0, 1, 2]
        labels = [sentiment_dataset.examples[i][1] for i in order]
        asm = assemble(sentiment_dataset, order, labels, single_template)
        tokens = lm.tokenize(asm.text)
        lmap = resolve_label_tokens(lm, single_template, sentiment_dataset.class_names)
        pos = len(lm.tokenize(asm.text[: asm.segments[2].label_start - 1]))
        out = lm.logprobs(tokens, [pos], list(lmap.first_token_ids))
        assert np.allclose(np.exp(out[0]), [0.75, 0.25])


def _wire_pair(backend, **cfg_kwargs):
    # TestClient is a sync httpx.Client running the app in-process, so the
    # full request/response JSON path is exercised without sockets
    client = TestClient(create_app(backend))
    config = RemoteConfig(base_url=str(client.base_url), **cfg_kwargs)
    return RemoteBackend(config, client=client)


class TestRemoteProtocol:
    @pytest.fixture()
    def remote(self, bayes_lm):
        return _wire_pair(bayes_lm)

    def test_tokenize_round_trip(self, remote, bayes_lm):
        text = "Sentence: 'the film was great'\nAnswer: positive\n\n"
        assert remote.tokenize(text) == bayes_lm.tokenize(text)
        assert remote.detokenize(remote.tokenize(text)) == text

    def test_logprobs_shape_and_bound(self, remote, bayes_lm, sentiment_dataset, single_template):
        order = [0, 1]
        labels = [sentiment_dataset.examples[i][1] for i in order]
        asm = assemble(sentiment_dataset, order, labels, single_template)
        tokens = remote.tokenize(asm.text)
        lmap = resolve_label_tokens(remote, single_template, sentiment_dataset.class_names)
        out = remote.logprobs(tokens, [5, 12], list(lmap.first_token_ids))
        assert out.shape == (2, 2)
        assert out.max() <= 0.0

    def test_identical_requests_identical_payloads(self, remote):
        tokens = remote.tokenize("Sentence: 'the film was great'\nAnswer:")
        a = remote.logprobs(tokens, [len(tokens)], tokens[:2])
        b = remote.logprobs(tokens, [len(tokens)], tokens[:2])
        assert np.array_equal(a, b)

    def test_matches_in_process_backend(self, remote, bayes_lm, sentiment_dataset, single_template):
        order = [0, 1, 2, 3]
        labels = [sentiment_dataset.examples[i][1] for i in order]
        asm = assemble(sentiment_dataset, order, labels, single_template)
        tokens = bayes_lm.tokenize(asm.text)
        lmap = resolve_label_tokens(bayes_lm, single_template, sentiment_dataset.class_names)
        pos = [len(bayes_lm.tokenize(asm.text[: s.label_start - 1])) for s in asm.segments]
        direct = bayes_lm.logprobs(tokens, pos, list(lmap.first_token_ids))
        wired = remote.logprobs(tokens, pos, list(lmap.first_token_ids))
        finite = np.isfinite(direct)
        assert np.allclose(direct[finite], wired[finite])
        # -inf travels as a very large negative float, far below the extraction floor
        assert np.all(wired[~finite] < -1e29)

    def test_position_out_of_range_is_permanent(self, remote):
        with pytest.raises(PermanentBackendError):
            remote.logprobs([1, 2, 3], [99], [1])

    def test_token_limit_is_permanent(self, sentiment_dataset, single_template, sentiment_tokenizer):
        lm = make_bayesian_lm(sentiment_dataset, single_template, sentiment_tokenizer, token_limit=4)
        remote = _wire_pair(lm)
        with pytest.raises(PermanentBackendError):
            remote.logprobs([1, 2, 3, 4, 5], [0], [1])

    def test_info_endpoint(self, remote, bayes_lm):
        assert remote.vocab_size == bayes_lm.vocab_size
        assert remote.token_limit == bayes_lm.token_limit

    def test_env_var_configuration(self, monkeypatch):
        monkeypatch.setenv("ICL_DYNAMICS_BACKEND_URL", "http://from-env")
        cfg = RemoteConfig.from_env()
        assert cfg.base_url == "http://from-env"
        # the environment variable overrides a configured URL
        assert RemoteConfig.from_env(base_url="http://from-config").base_url == "http://from-env"
        monkeypatch.delenv("ICL_DYNAMICS_BACKEND_URL")
        assert RemoteConfig.from_env(base_url="http://from-config").base_url == "http://from-config"
        with pytest.raises(PermanentBackendError):
            RemoteConfig.from_env()


class _FlakyTransport(httpx.BaseTransport):
    """Fails n times with a 503, then replays the request into the app."""

    def __init__(self, app, failures: int):
        self.client = TestClient(app)
        self.remaining = failures
        self.attempts = 0

    def handle_request(self, request):
        self.attempts += 1
        if self.remaining > 0:
            self.remaining -= 1
            return httpx.Response(503, text="temporarily overloaded")
        resp = self.client.request(
            request.method, request.url.path, content=request.read(),
            headers={"content-type": "application/json"},
        )
        return httpx.Response(resp.status_code, content=resp.content)


class _MalformedTransport(httpx.BaseTransport):
    def handle_request(self, request):
        return httpx.Response(200, json={"unexpected": "shape"})


class TestBayesianLearningBehavior:
    def test_default_labels_monotone_in_expectation(self):
        # all-consistent contexts sharpen the predictive monotonically
        values = [posterior_identity(m, 0, 0.5, 0.1) * 0.9 + (1 - posterior_identity(m, 0, 0.5, 0.1)) * 0.1
                  for m in range(31)]
        assert all(b >= a for a, b in zip(values, values[1:]))

    def test_randomized_labels_hover_at_chance(self):
        """MC over >= 1e4 runs: expected predictive for the displayed label ~ 0.5."""
        rng = np.random.default_rng(7)
        runs = 20_000
        m = 10
        consistent = rng.random((runs, m + 1)) < 0.5
        n_cons = consistent[:, :m].sum(axis=1)
        from conftest import predictive_match as pm

        p_cons = np.array([pm(int(k), m - int(k), 0.5, 0.1) for k in n_cons])
        p_displayed = np.where(consistent[:, m], p_cons, 1.0 - p_cons)
        assert abs(p_displayed.mean() - 0.5) < 0.05

    def test_pipeline_spot_check_matches_posterior_chain(
        self, sentiment_dataset, single_template, bayes_lm
    ):
        from conftest import balanced_order, predictive_match, run_single_pass

        order = balanced_order(sentiment_dataset, 8)
        labels = [sentiment_dataset.examples[i][1] for i in order]
        _, _, _, _, curve = run_single_pass(
            sentiment_dataset, single_template, bayes_lm, order, labels
        )
        for m in range(8):
            assert curve.probs[m, labels[m]] == pytest.approx(
                predictive_match(m, 0, 0.5, 0.1), abs=1e-12
            )


class TestReplacementAlphabets:
    @pytest.fixture()
    def aliased_lm(self, sentiment_dataset, single_template):
        from icl_dynamics.backends import BayesianMappingLM, ReferenceTokenizer, marker_feature
        from icl_dynamics.runner import collect_words, content_words

        tok = ReferenceTokenizer(
            collect_words(sentiment_dataset, single_template, extra=["A", "B"])
        )
        return BayesianMappingLM(
            tok,
            single_template,
            sentiment_dataset.class_names,
            marker_feature(["awful", "great"]),
            prior_identity=0.9,
            noise=0.1,
            content_words=content_words(sentiment_dataset),
            alias_class_names=[("A", "B")],
        )

    def test_novel_names_start_from_neutral_prior(self, sentiment_dataset, single_template, aliased_lm):
        from icl_dynamics.tokenalign import resolve_label_tokens

        alias_map = resolve_label_tokens(aliased_lm, single_template, ("A", "B"))
        primary_map = resolve_label_tokens(
            aliased_lm, single_template, sentiment_dataset.class_names
        )
        text = single_template.render_query(sentiment_dataset.examples[0][0])
        tokens = aliased_lm.tokenize(text)
        alias = np.exp(aliased_lm.logprobs(tokens, [len(tokens)], list(alias_map.first_token_ids)))[0]
        primary = np.exp(
            aliased_lm.logprobs(tokens, [len(tokens)], list(primary_map.first_token_ids))
        )[0]
        # the built-in preference applies to the primary names only
        assert alias[0] == pytest.approx(alias[1], abs=1e-12)
        assert primary[sentiment_dataset.examples[0][1]] != pytest.approx(
            primary[1 - sentiment_dataset.examples[0][1]], abs=1e-6
        )
        # slot mass splits across the two alphabets
        assert alias.sum() + primary.sum() == pytest.approx(1.0, abs=1e-12)

    def test_alias_posterior_learns_from_alias_pairs(self, sentiment_dataset, single_template, aliased_lm):
        from icl_dynamics import assemble
        from icl_dynamics.tokenalign import resolve_label_tokens

        order = [0, 1, 2, 3]
        truth = [sentiment_dataset.examples[i][1] for i in order]
        asm = assemble(
            sentiment_dataset, order, truth, single_template, class_names=("A", "B")
        )
        alias_map = resolve_label_tokens(aliased_lm, single_template, ("A", "B"))
        tokens = aliased_lm.tokenize(asm.text)
        pos = len(aliased_lm.tokenize(asm.text[: asm.segments[3].label_start - 1]))
        row = np.exp(aliased_lm.logprobs(tokens, [pos], list(alias_map.first_token_ids)))[0]
        renorm = row / row.sum()
        # three consistent A/B pairs with a 0.5 prior
        assert renorm[truth[3]] == pytest.approx(posterior_identity(3, 0, 0.5, 0.1) * 0.9
                                                 + (1 - posterior_identity(3, 0, 0.5, 0.1)) * 0.1,
                                                 abs=1e-12)

    def test_same_name_set_reversed_is_one_alphabet(self, sentiment_dataset, single_template):
        from icl_dynamics.backends import BayesianMappingLM, ReferenceTokenizer, marker_feature
        from icl_dynamics.runner import collect_words, content_words

        tok = ReferenceTokenizer(
            collect_words(sentiment_dataset, single_template, extra=["A", "B"])
        )
        lm = BayesianMappingLM(
            tok, single_template, sentiment_dataset.class_names,
            marker_feature(["awful", "great"]),
            content_words=content_words(sentiment_dataset),
            alias_class_names=[("A", "B"), ("B", "A")],
        )
        assert lm.class_name_sets == [sentiment_dataset.class_names, ("A", "B")]


class TestRemoteRetries:
    def test_retries_then_succeeds(self, bayes_lm):
        flaky = _FlakyTransport(create_app(bayes_lm), failures=2)
        client = httpx.Client(transport=flaky, base_url="http://service")
        remote = RemoteBackend(
            RemoteConfig(base_url="http://service", max_retries=3, backoff=0.0), client=client
        )
        assert remote.tokenize("Answer:") == bayes_lm.tokenize("Answer:")
        assert flaky.attempts == 3

    def test_retries_exhausted(self, bayes_lm):
        flaky = _FlakyTransport(create_app(bayes_lm), failures=10)
        client = httpx.Client(transport=flaky, base_url="http://service")
        remote = RemoteBackend(
            RemoteConfig(base_url="http://service", max_retries=2, backoff=0.0), client=client
        )
        with pytest.raises(RetryableBackendError):
            remote.tokenize("Answer:")

    def test_malformed_response_is_protocol_error(self):
        client = httpx.Client(transport=_MalformedTransport(), base_url="http://service")
        remote = RemoteBackend(RemoteConfig(base_url="http://service"), client=client)
        with pytest.raises(ProtocolError):
            remote.tokenize("Answer:")
        with pytest.raises(ProtocolError):
            remote.logprobs([1, 2], [0], [1])

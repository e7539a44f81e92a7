import numpy as np
import pytest
from numpy.testing import assert_array_equal

from pySeqDistill import (Catalog, ItemMeta, ProfileCache, PromptTemplate, UserProfile, UserSequence,
                          aggregate_metadata, default_template, encode_profiles, generate_profiles,
                          render_prompt)
from pySeqDistill._profiles import MissingCatalogEntryError, build_prompts, format_item, prompt_hash
from pySeqDistill.clients import (ChatCompletionClient, EmbeddingEndpointEncoder, MockLLMClient,
                                  MockTextEncoder)
from pySeqDistill.utils import ExternalServiceError, ValidationError, read_jsonl


def make_catalog(n=30):
    ids = ['m%02d' % i for i in range(n)]
    items = dict((i, ItemMeta(title='Movie %s' % i, genres='Drama|Comedy' if k % 2 else 'Horror',
                              description='A film.' if k % 3 else None))
                 for k, i in enumerate(ids))
    return Catalog(items, ids, dict((i, n) for n, i in enumerate(ids, 1)), 1)


@pytest.fixture
def movies():
    items = {'ts': ItemMeta(title='Toy Story', genres='Animation|Comedy'),
             'heat': ItemMeta(title='Heat', genres='Action, Crime', description='A heist.')}
    return Catalog(items, ['heat', 'ts'], {'heat': 1, 'ts': 2}, 1)


def test_format_item_title_genres_rating():
    meta = ItemMeta(title='Toy Story', genres='Animation|Comedy')
    assert format_item('ts', meta, ('title', 'genres'), 5.0) == 'Toy Story (Animation, Comedy) - rating 5'


def test_format_item_leaves_out_missing_fields():
    meta = ItemMeta(title='Toy Story', categories='Kids')
    assert format_item('ts', meta, ('title', 'categories', 'description')) == 'Toy Story (Kids)'
    assert format_item('ts', ItemMeta(), ('title',)) == 'ts'


def test_aggregate_metadata_two_movies(movies):
    template = default_template('movies', ('title', 'genres'), rating_threshold=4)
    doc = aggregate_metadata(UserSequence('u', [2, 1], [1, 2], [5.0, 2.0]), movies, template)
    assert doc == 'Toy Story (Animation, Comedy) - rating 5\nHeat (Action, Crime) - rating 2'


def test_aggregate_metadata_matches_concatenation():
    catalog = make_catalog()
    rng = np.random.default_rng(0)
    items = [int(i) for i in rng.permutation(np.arange(1, 31))]
    template = default_template('movies', ('title', 'genres', 'description'))
    doc = aggregate_metadata(UserSequence('u', items, list(range(30))), catalog, template)

    lines = []
    for index in items:
        meta = catalog.items[catalog.item_ids[index - 1]]
        line = meta.title + ' (' + meta.genres.replace('|', ', ') + ')'
        if meta.description:
            line += ': ' + meta.description
        lines.append(line)
    assert doc == '\n'.join(lines)


def test_aggregate_metadata_unknown_item(movies):
    with pytest.raises(MissingCatalogEntryError):
        aggregate_metadata(UserSequence('u', [3], [1]), movies, default_template())


def test_render_prompt_is_deterministic(movies):
    template = default_template('movies', ('title', 'genres'))
    doc = aggregate_metadata(UserSequence('u', [1, 2], [1, 2]), movies, template)
    a, b = render_prompt(doc, template), render_prompt(doc, template)
    assert a == b
    assert prompt_hash(a) == prompt_hash(b)
    assert doc in a
    for n in range(1, 6):
        assert '\n%d. ' % n in a


def test_template_needs_five_non_empty_blocks():
    with pytest.raises(ValidationError):
        PromptTemplate('movies', ['a', 'b', '', 'd', 'e'], ('title',))
    with pytest.raises(ValidationError):
        PromptTemplate('movies', ['a', 'b', 'c', 'd'], ('title',))


def test_rating_threshold_in_fourth_block():
    blocks = default_template('movies', rating_threshold=4).instruction_blocks
    assert 'rating 4 or above' in blocks[3]
    assert all('{{' not in b for b in blocks)
    unrated = default_template('movies').instruction_blocks
    assert 'frequently' in unrated[2] and 'rarely' in unrated[3]


def test_render_prompt_rejects_empty_document():
    with pytest.raises(ValueError):
        render_prompt('', default_template())


def test_build_prompts_one_per_sequence(movies):
    prompts = build_prompts([UserSequence('a', [1], [1]), UserSequence('b', [2, 1], [1, 2])], movies,
                            default_template('movies', ('title',)))
    assert [u for u, _ in prompts] == ['a', 'b']
    assert 'Toy Story\nHeat' in prompts[1][1]


class FailingOnce(MockLLMClient):

    def __init__(self, marker):
        super(FailingOnce, self).__init__()
        self.marker = marker

    def generate(self, prompt):
        if self.marker in prompt:
            raise ExternalServiceError('endpoint unreachable')
        return super(FailingOnce, self).generate(prompt)


def prompts(n=10):
    return [('u%d' % i, 'history of user %d' % i) for i in range(n)]


def test_mock_client_is_deterministic():
    a, b = MockLLMClient(), MockLLMClient()
    assert a.generate('same prompt') == b.generate('same prompt')
    assert a.generate('same prompt') != a.generate('other prompt')
    assert len(a.generate('x').splitlines()) == 5


def test_cached_prompts_make_no_calls(tmpdir):
    path = str(tmpdir.join('profiles.jsonl'))
    first = generate_profiles(prompts(), MockLLMClient(), ProfileCache(path), n_jobs=2)

    client = MockLLMClient()
    second = generate_profiles(prompts(), client, ProfileCache(path), n_jobs=2)
    assert client.calls == 0
    assert second == first
    assert [p.user_id for p in second] == ['u%d' % i for i in range(10)]


def test_changed_prompt_is_regenerated(tmpdir):
    path = str(tmpdir.join('profiles.jsonl'))
    generate_profiles(prompts(), MockLLMClient(), ProfileCache(path))
    client = MockLLMClient()
    changed = prompts()
    changed[3] = ('u3', 'a longer history of user 3')
    generate_profiles(changed, client, ProfileCache(path))
    assert client.calls == 1


def test_failure_is_recorded_and_retried(tmpdir):
    path = str(tmpdir.join('profiles.jsonl'))
    cache = ProfileCache(path)
    out = generate_profiles(prompts(), FailingOnce('user 7'), cache, n_jobs=3)
    assert len(out) == 9
    assert 'u7' not in [p.user_id for p in out]
    assert list(cache.failures) == ['u7']
    assert len(read_jsonl(path)) == 9
    assert read_jsonl(cache.failure_path)[0]['user_id'] == 'u7'

    client = MockLLMClient()
    out = generate_profiles(prompts(), client, ProfileCache(path), n_jobs=3)
    assert client.calls == 1
    assert len(out) == 10


def test_cache_skips_truncated_line(tmpdir):
    path = str(tmpdir.join('profiles.jsonl'))
    generate_profiles(prompts(3), MockLLMClient(), ProfileCache(path))
    with open(path, 'a') as f:
        f.write('{"user_id": "u9", "te')
    assert len(ProfileCache(path)) == 3


def test_mock_encoder_is_deterministic_unit_vectors():
    enc = MockTextEncoder(64)
    a = enc.encode(['alpha', 'beta', 'alpha'])
    assert a.shape == (3, 64)
    assert_array_equal(a[0], a[2])
    assert_array_equal(a, MockTextEncoder(64).encode(['alpha', 'beta', 'alpha']))
    np.testing.assert_allclose(np.linalg.norm(a, axis=1), 1.0)
    assert abs(a[0] @ a[1]) < 0.99


class BrokenOnText(MockTextEncoder):

    def encode(self, texts):
        if 'broken' in texts:
            raise RuntimeError('encoder error')
        return super(BrokenOnText, self).encode(texts)


def test_encode_profiles_skips_failing_rows():
    profiles = [UserProfile('u%d' % i, t, 'h', 'mock') for i, t in enumerate(['a', 'broken', 'c', 'a'])]
    encoded = encode_profiles(profiles, BrokenOnText(8), batch_size=3)
    assert encoded.user_ids == ['u0', 'u2', 'u3']
    assert encoded.skipped == ['u1']
    assert encoded.matrix.shape == (3, 8)
    assert_array_equal(encoded.matrix[0], encoded.matrix[2])


class FakeResponse(object):

    def __init__(self, status_code, body=None):
        self.status_code = status_code
        self.body = body
        self.text = str(body)

    def json(self):
        return self.body


class FakeSession(object):

    def __init__(self, responses):
        self.responses = list(responses)
        self.requests = []

    def post(self, url, json=None, headers=None, timeout=None):
        self.requests.append({'url': url, 'json': json, 'headers': headers})
        return self.responses.pop(0)


def test_chat_client_retries_server_errors(monkeypatch):
    monkeypatch.setenv('LLM_API_TOKEN', 'secret')
    ok = FakeResponse(200, {'choices': [{'message': {'content': 'profile text'}}]})
    session = FakeSession([FakeResponse(503), FakeResponse(429), ok])
    client = ChatCompletionClient('http://llm/v1/chat/completions', backoff=0, session=session)
    assert client.generate('prompt') == 'profile text'
    assert len(session.requests) == 3
    assert session.requests[0]['headers']['Authorization'] == 'Bearer secret'
    assert session.requests[0]['json']['messages'][0]['content'] == 'prompt'


def test_chat_client_gives_up():
    session = FakeSession([FakeResponse(500)] * 3)
    client = ChatCompletionClient('http://llm', max_retries=3, backoff=0, session=session)
    with pytest.raises(ExternalServiceError):
        client.generate('prompt')
    assert len(session.requests) == 3


def test_chat_client_does_not_retry_client_errors():
    session = FakeSession([FakeResponse(401, 'denied')])
    with pytest.raises(ExternalServiceError):
        ChatCompletionClient('http://llm', backoff=0, session=session).generate('prompt')
    assert len(session.requests) == 1


def test_embedding_endpoint_checks_shape():
    rows = [{'index': 1, 'embedding': [0.0, 1.0]}, {'index': 0, 'embedding': [1.0, 0.0]}]
    session = FakeSession([FakeResponse(200, {'data': rows}), FakeResponse(200, {'data': rows})])
    enc = EmbeddingEndpointEncoder('http://enc', output_dim=2, backoff=0, session=session)
    assert_array_equal(enc.encode(['a', 'b']), [[1.0, 0.0], [0.0, 1.0]])
    assert session.requests[0]['json']['input'] == ['passage: a', 'passage: b']
    with pytest.raises(ExternalServiceError):
        enc.encode(['a', 'b', 'c'])

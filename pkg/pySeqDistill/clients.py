"""
pySeqDistill Clients
====================
Text generation and text encoding backends used by the profile stage.

* `ChatCompletionClient` - HTTP chat-completion endpoint (OpenAI-compatible)
* `MockLLMClient` - deterministic offline stand-in
* `EmbeddingEndpointEncoder` - HTTP embedding endpoint
* `LocalTransformerEncoder` - local E5-style encoder (needs `transformers`)
* `MockTextEncoder` - hash-seeded unit vectors
"""

import hashlib
import logging
import os
import threading

import funcy as fp
import numpy as np
import requests

from .utils import ExternalServiceError

log = logging.getLogger(__name__)

DEFAULT_LLM = 'gemma-2-9b-it'
DEFAULT_ENCODER = 'multilingual-e5-large'
DEFAULT_ENCODER_DIM = 1024


class _RetryableStatus(requests.HTTPError):
    pass


TRANSPORT_ERRORS = (requests.ConnectionError, requests.Timeout, _RetryableStatus)


def _auth_headers(token_env):
    headers = {'Content-Type': 'application/json'}
    token = os.environ.get(token_env) if token_env else None
    if token:
        headers['Authorization'] = 'Bearer ' + token
    return headers


class _HttpEndpoint(object):
    """POST JSON to an endpoint, retrying transport failures with exponential backoff."""

    def __init__(self, endpoint, token_env=None, timeout=60.0, max_retries=3, backoff=1.0, session=None):
        if not endpoint:
            raise ValueError('an endpoint URL is required')
        self.endpoint = endpoint
        self.token_env = token_env
        self.timeout = float(timeout)
        self.max_retries = int(max_retries)
        self.backoff = float(backoff)
        self.session = session or requests.Session()

    def _post_once(self, payload):
        resp = self.session.post(self.endpoint, json=payload, headers=_auth_headers(self.token_env),
                                 timeout=self.timeout)
        if resp.status_code == 429 or resp.status_code >= 500:
            raise _RetryableStatus('{0} from {1}'.format(resp.status_code, self.endpoint), response=resp)
        if resp.status_code >= 400:
            raise ExternalServiceError('{0} from {1}: {2}'.format(resp.status_code, self.endpoint,
                                                                   resp.text[:200]))
        return resp.json()

    def post(self, payload):
        call = fp.retry(self.max_retries, errors=TRANSPORT_ERRORS,
                        timeout=lambda attempt: self.backoff * 2 ** attempt)(self._post_once)
        try:
            return call(payload)
        except TRANSPORT_ERRORS as e:
            raise ExternalServiceError('{0} unreachable after {1} attempts: {2}'
                                       .format(self.endpoint, self.max_retries, e))


class LLMClient(object):
    """Text in, text out. `generator_id` names the model behind the client."""
    generator_id = None

    def generate(self, prompt):
        raise NotImplementedError()


class ChatCompletionClient(LLMClient):
    """Client for an OpenAI-compatible `/chat/completions` endpoint.

    Parameters
    ----------
    endpoint : string
        Full URL of the chat-completion route.
    model_id : string
        Model name sent with every request; also the `generator_id`.
    token_env : string
        Environment variable holding the bearer token (never the token itself).
    timeout : float
        Per-call timeout in seconds.
    max_retries : int
        Attempts per prompt for transport failures and 429/5xx answers.
    """

    def __init__(self, endpoint, model_id=DEFAULT_LLM, token_env='LLM_API_TOKEN', timeout=60.0,
                 max_retries=3, backoff=1.0, temperature=0.0, max_tokens=512, session=None):
        self.http = _HttpEndpoint(endpoint, token_env, timeout, max_retries, backoff, session)
        self.generator_id = model_id
        self.temperature = temperature
        self.max_tokens = max_tokens

    def generate(self, prompt):
        payload = {'model': self.generator_id,
                   'messages': [{'role': 'user', 'content': prompt}],
                   'temperature': self.temperature,
                   'max_tokens': self.max_tokens}
        body = self.http.post(payload)
        try:
            return body['choices'][0]['message']['content']
        except (KeyError, IndexError, TypeError):
            raise ExternalServiceError('unexpected response shape from {0}'.format(self.http.endpoint))


_MOCK_WORDS = {
    'themes': ['everyday essentials', 'premium picks', 'classic favourites', 'new releases',
               'budget finds', 'niche collectibles', 'family choices', 'gift ideas'],
    'attributes': ['quality', 'price', 'brand consistency', 'novelty', 'durability',
                   'visual style', 'storytelling', 'convenience'],
    'drift': ['broadening', 'narrowing', 'stable', 'shifting toward recent trends'],
}


class MockLLMClient(LLMClient):
    """Deterministic offline client: a fixed five-section profile whose
    wording is picked from a digest of the prompt."""
    generator_id = 'mock-llm'

    def __init__(self):
        self._lock = threading.Lock()
        self.calls = 0

    def generate(self, prompt):
        with self._lock:
            self.calls += 1
        digest = hashlib.sha256(prompt.encode('utf-8')).digest()

        def pick(kind, i):
            words = _MOCK_WORDS[kind]
            return words[digest[i] % len(words)]

        return '\n'.join([
            '1. Engagement: mostly {0} and {1}.'.format(pick('themes', 0), pick('themes', 1)),
            '2. Evolution: interests are {0} over time.'.format(pick('drift', 2)),
            '3. Preferences: values {0} and {1}.'.format(pick('attributes', 3), pick('attributes', 4)),
            '4. Dislikes: items lacking {0}.'.format(pick('attributes', 5)),
            '5. Summary: a {0} user ({1}).'.format(pick('themes', 6), digest[:4].hex()),
        ])


class TextEncoderHandle(object):
    """Maps texts to fixed-size vectors; `output_dim` never changes for a handle."""
    encoder_id = None
    output_dim = DEFAULT_ENCODER_DIM

    def encode(self, texts):
        """Encode a list of strings into an array of shape (`len(texts)`, `output_dim`)."""
        raise NotImplementedError()


class MockTextEncoder(TextEncoderHandle):
    """Pseudo-random unit vectors seeded by the sha256 of each text."""

    def __init__(self, output_dim=DEFAULT_ENCODER_DIM, encoder_id='mock-encoder'):
        self.encoder_id = encoder_id
        self.output_dim = int(output_dim)

    def encode(self, texts):
        out = np.empty((len(texts), self.output_dim), dtype=np.float64)
        for i, text in enumerate(texts):
            seed = int.from_bytes(hashlib.sha256(text.encode('utf-8')).digest()[:8], 'little')
            v = np.random.default_rng(seed).standard_normal(self.output_dim)
            out[i] = v / np.linalg.norm(v)
        return out


class EmbeddingEndpointEncoder(TextEncoderHandle):
    """Encoder behind an OpenAI-compatible `/embeddings` endpoint."""

    def __init__(self, endpoint, model_id=DEFAULT_ENCODER, output_dim=DEFAULT_ENCODER_DIM,
                 token_env='ENCODER_API_TOKEN', prefix='passage: ', timeout=60.0, max_retries=3,
                 backoff=1.0, session=None):
        self.http = _HttpEndpoint(endpoint, token_env, timeout, max_retries, backoff, session)
        self.encoder_id = model_id
        self.output_dim = int(output_dim)
        self.prefix = prefix or ''

    def encode(self, texts):
        body = self.http.post({'model': self.encoder_id, 'input': [self.prefix + t for t in texts]})
        try:
            rows = sorted(body['data'], key=lambda r: r.get('index', 0))
            out = np.asarray([r['embedding'] for r in rows], dtype=np.float64)
        except (KeyError, TypeError, ValueError):
            raise ExternalServiceError('unexpected response shape from {0}'.format(self.http.endpoint))
        if out.shape != (len(texts), self.output_dim):
            raise ExternalServiceError('expected embeddings of shape {0}, got {1}'
                                       .format((len(texts), self.output_dim), out.shape))
        return out


class LocalTransformerEncoder(TextEncoderHandle):
    """E5-style encoder run locally: prefixed input, average pooling over
    the attention mask, L2-normalised output."""

    def __init__(self, model_id='intfloat/multilingual-e5-large', output_dim=DEFAULT_ENCODER_DIM,
                 prefix='passage: ', max_length=512, device='cpu'):
        try:
            from transformers import AutoModel, AutoTokenizer
        except ImportError:
            raise ImportError('LocalTransformerEncoder needs the `transformers` package '
                              '(pip install pySeqDistill[encoders])')
        self.encoder_id = model_id
        self.output_dim = int(output_dim)
        self.prefix = prefix or ''
        self.max_length = max_length
        self.device = device
        self.tokenizer = AutoTokenizer.from_pretrained(model_id)
        self.model = AutoModel.from_pretrained(model_id).to(device).eval()

    def encode(self, texts):
        import torch
        batch = self.tokenizer([self.prefix + t for t in texts], max_length=self.max_length,
                               padding=True, truncation=True, return_tensors='pt').to(self.device)
        with torch.no_grad():
            last = self.model(**batch).last_hidden_state
        mask = batch['attention_mask'].unsqueeze(-1).to(last.dtype)
        pooled = (last * mask).sum(dim=1) / mask.sum(dim=1)
        pooled = torch.nn.functional.normalize(pooled, p=2, dim=1)
        out = pooled.double().cpu().numpy()
        if out.shape[1] != self.output_dim:
            raise ValueError('{0} produces {1}-d vectors, configured output_dim is {2}'
                             .format(self.encoder_id, out.shape[1], self.output_dim))
        return out

"""Target-attribute captions from an external vision-language model.

Captions are requested over an OpenAI-style chat-completions endpoint with
the image attached as a PNG data URL, then cached on disk keyed by
(image content hash, prompt hash, model id). Captions are never checked for
correctness; overly long ones only trigger a warning.
"""

import base64
import hashlib
import io
import json
import logging
import os
import threading
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path

from PIL import Image

from .data import AlignedFace
from .errors import CaiiSwapError, EmptyResponse, EndpointUnavailable, OverBudget

log = logging.getLogger(__name__)

DEFAULT_MODEL_ID = "OpenGVLab/InternVL3-14B"
API_KEY_ENV = "CAIISWAP_VLM_API_KEY"
WORD_CEILING = 90

_DEFAULT_PROMPT = (
    "Describe pose, background, facial accessories, and all obstacles covering the face area "
    "in the given face image. Only 70 words are allowed."
)


def default_prompt():
    return _DEFAULT_PROMPT


def sha256_hex(data):
    if isinstance(data, str):
        data = data.encode("utf-8")
    return hashlib.sha256(data).hexdigest()


def prompt_hash(prompt):
    return sha256_hex(prompt)


def word_count(text):
    return len(text.split())


@dataclass(frozen=True)
class Caption:
    text: str
    word_count: int
    model_id: str
    prompt_hash: str

    def __post_init__(self):
        if not self.text:
            raise EmptyResponse("caption text is empty")
        if self.word_count != word_count(self.text):
            raise ValueError("word_count does not match text")


@dataclass(frozen=True)
class CaptionCacheKey:
    image_digest: str
    prompt_hash: str
    model_id: str

    def digest(self):
        return sha256_hex(f"{self.image_digest}|{self.prompt_hash}|{self.model_id}")


class CaptionCache:
    """Directory of JSON records, one per key, written via temp-file + rename."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def path(self, key):
        d = key.digest()
        return self.root / d[:2] / f"{d}.json"

    def get(self, key):
        p = self.path(key)
        if not p.exists():
            return None
        rec = json.loads(p.read_text(encoding="utf-8"))
        if rec.get("key") != asdict(key):
            return None
        return Caption(**rec["caption"])

    def put(self, key, caption):
        p = self.path(key)
        p.parent.mkdir(parents=True, exist_ok=True)
        tmp = p.with_name(f"{p.name}.{os.getpid()}.{threading.get_ident()}.tmp")
        tmp.write_text(json.dumps({"key": asdict(key), "caption": asdict(caption)}, ensure_ascii=False), encoding="utf-8")
        os.replace(tmp, p)


def encode_png(face):
    buf = io.BytesIO()
    Image.fromarray(face.to_uint8()).save(buf, format="PNG")
    return buf.getvalue()


def _image_bytes(image):
    if isinstance(image, (bytes, bytearray)):
        return bytes(image)
    if isinstance(image, AlignedFace):
        return encode_png(image)
    if isinstance(image, (str, Path)):
        return Path(image).read_bytes()
    raise TypeError(f"cannot encode image of type {type(image).__name__}")


# ---------------------------------------------------------------------------
# clients


class CaptionRequestError(CaiiSwapError):
    """Non-retryable rejection from the endpoint (4xx other than 429)."""


class ChatCompletionsClient:
    def __init__(self, endpoint, model_id=DEFAULT_MODEL_ID, api_key=None, timeout=60.0, max_tokens=160, transport=None):
        import httpx

        self.endpoint = endpoint
        self.model_id = model_id
        self.max_tokens = max_tokens
        headers = {}
        key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        self._http = httpx.Client(timeout=timeout, headers=headers, transport=transport)
        self._httpx = httpx

    def __repr__(self):
        return f"ChatCompletionsClient(endpoint={self.endpoint!r}, model_id={self.model_id!r})"

    def complete(self, prompt, image_png):
        url = "data:image/png;base64," + base64.b64encode(image_png).decode("ascii")
        body = {
            "model": self.model_id,
            "max_tokens": self.max_tokens,
            "messages": [
                {
                    "role": "user",
                    "content": [
                        {"type": "image_url", "image_url": {"url": url}},
                        {"type": "text", "text": prompt},
                    ],
                }
            ],
        }
        try:
            resp = self._http.post(self.endpoint, json=body)
        except self._httpx.HTTPError as exc:
            raise EndpointUnavailable(f"{type(exc).__name__} contacting {self.endpoint}") from None
        if resp.status_code == 429 or resp.status_code >= 500:
            raise EndpointUnavailable(f"HTTP {resp.status_code} from {self.endpoint}")
        if resp.status_code >= 400:
            raise CaptionRequestError(f"HTTP {resp.status_code} from {self.endpoint}")
        try:
            content = resp.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError):
            raise EmptyResponse("malformed chat-completions response") from None
        if isinstance(content, list):
            content = " ".join(part.get("text", "") for part in content if isinstance(part, dict))
        return content or ""

    def close(self):
        self._http.close()


class StubVLMClient:
    """Deterministic client for tests: fixed text or ``fn(prompt, image_bytes)``."""

    def __init__(self, text="A face.", model_id="stub-vlm", fn=None):
        self.text = text
        self.model_id = model_id
        self.fn = fn
        self.calls = 0
        self._lock = threading.Lock()

    def complete(self, prompt, image_png):
        with self._lock:
            self.calls += 1
        return self.fn(prompt, image_png) if self.fn else self.text


# ---------------------------------------------------------------------------


def generate_caption(image, prompt, client, cache=None, max_retries=4, backoff=0.5, max_backoff=8.0,
                     word_ceiling=WORD_CEILING, sleep=None):
    """Caption ``image`` (AlignedFace, path or encoded bytes), serving from ``cache`` when possible."""
    data = _image_bytes(image)
    key = CaptionCacheKey(sha256_hex(data), prompt_hash(prompt), client.model_id)
    if cache is not None:
        hit = cache.get(key)
        if hit is not None:
            return hit
    attempt = 0
    while True:
        try:
            text = client.complete(prompt, data)
            break
        except EndpointUnavailable:
            if attempt >= max_retries:
                raise
            delay = min(backoff * 2**attempt, max_backoff)
            log.warning("caption endpoint unavailable, retry %d/%d in %.2fs", attempt + 1, max_retries, delay)
            (sleep or time.sleep)(delay)
            attempt += 1
    text = (text or "").strip()
    if not text:
        raise EmptyResponse("model returned an empty caption")
    n = word_count(text)
    if n > word_ceiling:
        msg = f"caption has {n} words (> {word_ceiling})"
        log.warning(msg)
        warnings.warn(msg, OverBudget, stacklevel=2)
    caption = Caption(text, n, client.model_id, key.prompt_hash)
    if cache is not None:
        cache.put(key, caption)
    return caption


@dataclass
class CaptionFailure:
    image_id: str
    error: str
    message: str


def caption_corpus(manifest, client, cache, concurrency_limit=4, prompt=None, **kwargs):
    """Caption every entry; returns ``(updated_entries, failures)``.

    Output order follows the manifest regardless of completion order. A
    failing entry keeps its previous caption and is reported, never raised.
    """
    prompt = prompt or default_prompt()
    if concurrency_limit < 1:
        raise ValueError("concurrency_limit must be >= 1")

    def work(entry):
        try:
            return generate_caption(entry.image_path, prompt, client, cache, **kwargs), None
        except (CaiiSwapError, OSError) as exc:
            return None, CaptionFailure(entry.image_id, type(exc).__name__, str(exc))

    if concurrency_limit == 1:
        results = [work(e) for e in manifest]
    else:
        with ThreadPoolExecutor(max_workers=concurrency_limit) as pool:
            futures = [pool.submit(work, e) for e in manifest]
            try:
                results = [f.result() for f in futures]
            except BaseException:
                for f in futures:
                    f.cancel()
                raise

    updated, failures = [], []
    for entry, (caption, failure) in zip(manifest, results):
        if failure is not None:
            failures.append(failure)
            updated.append(entry)
        else:
            updated.append(replace(entry, caption=caption.text))
    return updated, failures

"""Deterministic fixture datasets built against a given model.

Everything is drawn from a seeded PCG64 generator and from the model's own
greedy decodes, so the same (model, seed, sizes) always yields the same file.
"""

from __future__ import annotations

import numpy as np

from .datasets import Dataset
from .edit import EditItem, PreservationQuery
from .errors import DatasetError
from .harness import containment_judge
from .model import ToyTransformer, _run, greedy_decode
from .vocab import OBJECT_WORDS, RELATION_WORDS, SPECIALS, SUBJECTS, detokenize, encode_answer, tokenize

EDIT_TEMPLATE = "{rel} of {subj}"
PARAPHRASE_TEMPLATES = ("tell me the {rel} of {subj}", "what is the {rel} of {subj}")
PRESERVATION_TEMPLATES = ("{rel} of {subj}", "the {rel} of {subj} is", "Q : {rel} of {subj} ?")
OBJECT_PHRASES = (
    "Paris", "London", "Berlin", "Tokyo", "Rome", "Madrid", "Oslo", "Cairo", "Lima",
    "Boston", "Chicago", "New York", "Apple", "Google", "Stanford University",
    "Oxford University", "Illinois Institute of Technology",
    "Massachusetts Institute of Technology", "French", "German", "Spanish",
    "English", "Japanese", "chess", "tennis", "soccer", "golf", "rugby",
)


def _fill(template: str) -> list[str]:
    return [template.format(rel=rel, subj=subj) for subj in SUBJECTS for rel in RELATION_WORDS]


def _shuffled(items: list, rng: np.random.Generator) -> list:
    return [items[i] for i in rng.permutation(len(items))]


def _special_ids(model: ToyTransformer) -> set[int]:
    return {model.vocab.id_of(s) for s in SPECIALS if s in model.vocab.tokens}


def _clean_decode(model: ToyTransformer, query: str, n: int) -> list[int] | None:
    """``n`` greedy tokens, or None if decoding hits a special token."""
    out = greedy_decode(model, tokenize(query, model.vocab), n, stop_token=None)
    return None if _special_ids(model) & set(out) else out


def _inconsistent_answer(model: ToyTransformer, query: str, rng: np.random.Generator, length: int) -> str | None:
    """A wrong first token followed by the model's own greedy continuation.

    The first token is never the model's top-1, so exact decoding fails, while
    each later token is top-1 given the forced prefix, so teacher-forced token
    accuracy stays positive although the model does not "know" the answer.
    """
    q = tokenize(query, model.vocab)
    top1 = int(np.argmax(_run(model, q).logits[-1]))
    candidates = [model.vocab.id_of(w) for w in SUBJECTS + OBJECT_WORDS]
    candidates = [c for c in candidates if c != top1]
    first = int(candidates[int(rng.integers(len(candidates)))])
    rest = greedy_decode(model, q + [first], length - 1, stop_token=None) if length > 1 else []
    if _special_ids(model) & set(rest):
        return None
    answer = detokenize([first] + rest, model.vocab)
    if containment_judge(model, query, answer):
        return None
    return answer


def _schedule(n: int, fraction: float) -> list[bool]:
    """Evenly interleaved pattern with ``round(n * fraction)`` True entries."""
    n_true = int(round(n * fraction))
    return [(i + 1) * n_true // n > i * n_true // n for i in range(n)]


def _answered_queries(model, pool, rng, n, consistent_fraction, prefix, lengths=(1, 2)):
    """Preservation queries with ground-truth answers, a given share consistent.

    Consistent answers are the model's greedy decode; inconsistent ones come
    from ``_inconsistent_answer`` and always span at least two tokens.
    """
    want = _schedule(n, consistent_fraction)
    need_c, need_i = sum(want), n - sum(want)
    cons, incons = [], []
    for q in pool:
        if len(cons) == need_c and len(incons) == need_i:
            break
        length = int(rng.choice(lengths))
        if len(cons) < need_c:
            ids = _clean_decode(model, q, length)
            if ids is not None:
                ans = detokenize(ids, model.vocab)
                if containment_judge(model, q, ans):
                    cons.append((q, ans))
                    continue
        if len(incons) < need_i:
            ans = _inconsistent_answer(model, q, rng, max(length, 2))
            if ans is not None:
                incons.append((q, ans))
    if len(cons) < need_c or len(incons) < need_i:
        raise DatasetError(f"query pool exhausted: built {len(cons) + len(incons)} of {n} answered queries")
    it_c, it_i = iter(cons), iter(incons)
    ordered = [next(it_c) if w else next(it_i) for w in want]
    return [PreservationQuery(query=q, gt_answer=a, id=f"{prefix}{i:03d}") for i, (q, a) in enumerate(ordered)]


def generate_dataset(
    model: ToyTransformer,
    kind: str = "counterfactual",
    n_edits: int = 32,
    n_preservation: int = 128,
    n_background: int = 0,
    seed: int = 0,
    name: str | None = None,
    consistent_fraction: float = 0.25,
    max_neighbors: int = 3,
) -> Dataset:
    """Build a fixture dataset against ``model``.

    Edit queries are ``"<relation> of <subject>"``.  The old answer of an edit
    is the model's one-token greedy answer and the new answer a random object
    phrase starting with a different token.  Neighbourhood queries are other
    edit-style queries the model answers with the same old token.  Preservation
    and background queries come from the remaining pool and never repeat an
    edit, neighbour or paraphrase string.
    """
    if kind not in ("counterfactual", "factual"):
        raise DatasetError(f"unknown dataset kind {kind!r}")
    if not 0.0 <= consistent_fraction <= 1.0:
        raise DatasetError("consistent_fraction must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    pool = _shuffled(_fill(EDIT_TEMPLATE), rng)
    first_token = {}
    for q in pool:
        ids = _clean_decode(model, q, 1)
        if ids is not None:
            first_token[q] = ids[0]

    used: set[str] = set()
    edits = []
    for q in pool:
        if len(edits) == n_edits:
            break
        if q in used or q not in first_token:
            continue
        old_id = first_token[q]
        neighbors = [c for c in pool if c != q and c not in used and first_token.get(c) == old_id][:max_neighbors]
        if kind == "counterfactual" and not neighbors:
            continue
        choices = [p for p in OBJECT_PHRASES if encode_answer(p, model.vocab)[0] != old_id]
        target_new = choices[int(rng.integers(len(choices)))]
        rel, _, subj = q.partition(" of ")
        paraphrases = tuple(t.format(rel=rel, subj=subj) for t in PARAPHRASE_TEMPLATES)
        used.add(q)
        used.update(paraphrases)
        if kind == "counterfactual":
            used.update(neighbors)
        edits.append(
            EditItem(
                query=q,
                target_new=target_new,
                target_old=model.vocab.token_of(old_id) if kind == "counterfactual" else None,
                paraphrases=paraphrases,
                neighborhood_queries=tuple(neighbors) if kind == "counterfactual" else (),
                id=f"e{len(edits):03d}",
            )
        )
    if len(edits) < n_edits:
        raise DatasetError(f"query pool exhausted: built {len(edits)} of {n_edits} edit items")

    rest = [q for t in PRESERVATION_TEMPLATES for q in _fill(t) if q not in used]
    rest = _shuffled(rest, rng)
    background = [
        PreservationQuery(query=q, id=f"b{i:03d}") for i, q in enumerate(rest[:n_background])
    ]
    if len(background) < n_background:
        raise DatasetError("query pool exhausted while drawing background queries")
    pres = _answered_queries(model, rest[n_background:], rng, n_preservation, consistent_fraction, "p")
    return Dataset(
        name=name or f"toy-{kind}",
        kind=kind,
        edit_items=tuple(edits),
        preservation_queries=tuple(pres),
        background_queries=tuple(background),
    )


def generate_inconsistency_fixture(
    model: ToyTransformer,
    n_consistent: int = 12,
    n_inconsistent: int = 24,
    seed: int = 0,
    name: str = "toy-inconsistency",
) -> Dataset:
    """Preservation-only dataset whose consistency split is known by construction.

    Ids starting with ``c`` carry the model's own greedy answer; ids starting
    with ``i`` carry a wrong first token followed by a fluent greedy tail.
    """
    rng = np.random.default_rng(seed)
    pool = _shuffled(_fill(EDIT_TEMPLATE), rng)
    n = n_consistent + n_inconsistent
    mixed = _answered_queries(model, pool, rng, n, n_consistent / n, "x", lengths=(2, 3))
    cons = [p for p in mixed if containment_judge(model, p.query, p.gt_answer)]
    incons = [p for p in mixed if not containment_judge(model, p.query, p.gt_answer)]
    pres = [PreservationQuery(query=p.query, gt_answer=p.gt_answer, id=f"c{i:03d}") for i, p in enumerate(cons)]
    pres += [PreservationQuery(query=p.query, gt_answer=p.gt_answer, id=f"i{i:03d}") for i, p in enumerate(incons)]
    return Dataset(name=name, kind="factual", edit_items=(), preservation_queries=tuple(pres))


# recipes for the datasets shipped in editlab/data, all built against init_model()
BUNDLED = {
    "toy-counterfactual": dict(kind="counterfactual", n_edits=32, n_preservation=512, n_background=72, seed=0),
    "toy-factual": dict(kind="factual", n_edits=32, n_preservation=128, n_background=72, seed=1),
}
INCONSISTENCY_FIXTURE = dict(n_consistent=12, n_inconsistent=24, seed=2)


def build_bundled(model: ToyTransformer, name: str) -> Dataset:
    """Rebuild one of the shipped datasets from its recipe."""
    if name in BUNDLED:
        return generate_dataset(model, name=name, **BUNDLED[name])
    if name == "toy-inconsistency":
        return generate_inconsistency_fixture(model, name=name, **INCONSISTENCY_FIXTURE)
    raise DatasetError(f"no bundled dataset named {name!r}")


def bundled_names() -> list[str]:
    return list(BUNDLED) + ["toy-inconsistency"]

"""Deterministic offline stand-in for the chat model.

It answers from the world's knowledge tables: demand cue words map to demand
dimensions, attribute keys map to canonical product dimensions through the
synonym table, and description words map to dimensions through the lexicon.
"""
from __future__ import annotations

import json

from ..embedding import tokenize
from ..rng import derive_rng
from . import prompts
from .client import DecodeOptions


class MockPromptError(ValueError):
    pass


_ANALYSIS = ["grounded in {ev}", "evidenced by {ev}", "supported by {ev}"]


class MockLLM:
    def __init__(self, tables, seed: int = 0):
        self.seed = seed
        self.cue_dim = {c: d for d, cues in tables.cues.items() for c in cues}
        self.key_dim = {}
        for canon, syns in tables.synonyms.items():
            self.key_dim[canon] = canon
            for s in syns:
                self.key_dim[s] = canon
        self.lexicon = dict(tables.lexicon)
        self.calls = 0

    def complete(self, system: str, prompt: str, options: DecodeOptions | None = None) -> str:
        self.calls += 1
        try:
            kind = prompts.kind_of(prompt)
        except KeyError as e:
            raise MockPromptError(str(e)) from None
        inputs = prompts.inputs_of(prompt)
        handler = {
            prompts.USER_DEMAND: self._demand,
            prompts.PRODUCT_ATTRIBUTE: self._attributes,
            prompts.REFINE: self._refine,
            prompts.KNOWLEDGE: self._knowledge,
            prompts.REPAIR: self._repair,
        }[kind]
        return handler(inputs)

    def canonical_key(self, key: str) -> str:
        return self.key_dim.get(key.strip().lower(), key.strip().lower())

    def _demand(self, inp: dict) -> str:
        dims, trace = [], []
        for q in inp["queries"]:
            hits = [self.cue_dim[t] for t in tokenize(q) if t in self.cue_dim]
            if not hits:
                trace.append(f"- {q!r}: no demand cue, skipped")
                continue
            d = hits[0]
            trace.append(f"- {q!r}: joins {d}" if d in dims else f"- {q!r}: opens new dimension {d}")
            if d not in dims:
                dims.append(d)
        return "Clustering decisions:\n" + "\n".join(trace) + \
            "\nThe dimensions are mutually exclusive.\nFINAL TAXONOMY:\n" + json.dumps(dims)

    def _attributes(self, inp: dict) -> str:
        dims, trace = [], []
        for key, value in inp["attributes"]:
            d = self.canonical_key(key)
            trace.append(f"- {key}: {value} -> {d}")
            if d not in dims:
                dims.append(d)
        return "Clustering decisions:\n" + "\n".join(trace) + "\nFINAL TAXONOMY:\n" + json.dumps(dims)

    def _refine(self, inp: dict) -> str:
        parent = inp["parent_dimensions"]
        out, trace = [], []
        if inp["perspective"] == prompts.PRODUCT_ATTRIBUTE:
            seen: dict[str, list[str]] = {}
            for item in inp["sample_items"]:
                for key, _ in item.get("attributes", []):
                    seen.setdefault(self.canonical_key(key), []).append(key)
            for d in parent:
                if d in seen:
                    out.append({"label": d, "provenance": "inherited", "captures": sorted(set(seen[d]))})
                    trace.append(f"- {d}: inherited, present in the subcategory's attributes")
                else:
                    trace.append(f"- {d}: removed, no subcategory item carries it")
            for d, keys in seen.items():
                if d not in parent:
                    out.append({"label": d, "provenance": "new", "captures": sorted(set(keys))})
                    trace.append(f"- {d}: new, specific to {inp['subcategory']}")
        else:
            for d in parent:
                out.append({"label": d, "provenance": "inherited", "captures": []})
                trace.append(f"- {d}: inherited, no subcategory-specific demand signal")
        return "Reasoning trace:\n" + "\n".join(trace) + "\nFINAL TAXONOMY:\n" + json.dumps(out)

    def _entries(self, item: dict, dims: list[str], rng) -> list[dict]:
        words = tokenize(item.get("description", ""))
        for _, v in item.get("attributes", []):
            words.extend(tokenize(v))
        out = []
        for d in dims:
            kws = []
            for w in words:
                if self.lexicon.get(w) == d and w not in kws:
                    kws.append(w)
            kws = kws[:3] or [d]
            tmpl = _ANALYSIS[int(rng.integers(len(_ANALYSIS)))]
            out.append({"dimension": d, "analysis": f"{d} " + tmpl.format(ev=", ".join(kws)), "keywords": kws})
        return out

    def _knowledge(self, inp: dict) -> str:
        rng = derive_rng(self.seed, "mock", int(inp["item"].get("item_id", 0)))
        obj = {
            "user_demand": self._entries(inp["item"], inp["user_demand_dimensions"], rng),
            "product_attribute": self._entries(inp["item"], inp["product_attribute_dimensions"], rng),
        }
        return json.dumps(obj)

    def _repair(self, inp: dict) -> str:
        return self._knowledge(inp["request"])


def mock_llm(tables, seed: int = 0) -> MockLLM:
    return MockLLM(tables, seed)

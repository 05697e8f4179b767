"""The three agent layers and their orchestration over a catalog."""
from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

from ..embedding import ItemKnowledge
from . import prompts
from .client import AgentBudget, DecodeOptions, LLMClient, ResponseCache, prompt_key
from .schema import BAD_LABEL, SchemaError, parse_final_list, parse_label_list, validate_knowledge_json

PROVENANCE = ("inherited", "adapted", "new")
MAX_LABEL_CHARS = 15


class AgentFailure(RuntimeError):
    def __init__(self, message: str, raw: str = "", code: str = ""):
        super().__init__(message)
        self.raw = raw
        self.code = code


@dataclass
class Taxonomy:
    perspective: str
    category_path: list[str]
    dimensions: list[str]

    def __post_init__(self):
        if len(set(self.dimensions)) != len(self.dimensions):
            raise ValueError(f"duplicate dimension labels: {self.dimensions}")


@dataclass
class RefinedTaxonomy(Taxonomy):
    provenance: dict[str, str] = field(default_factory=dict)
    captures: dict[str, list[str]] = field(default_factory=dict)
    trace: str = ""

    def __post_init__(self):
        super().__post_init__()
        missing = [d for d in self.dimensions if self.provenance.get(d) not in PROVENANCE]
        if missing:
            raise ValueError(f"dimensions without provenance: {missing}")


@dataclass
class ItemMeta:
    item_id: int
    title: str
    category_path: tuple[str, str]
    attributes: list[tuple[str, str]]
    price_bucket: int = 0
    description: str = ""

    def to_prompt(self) -> dict:
        return {"item_id": self.item_id, "title": self.title, "category": list(self.category_path),
                "attributes": [list(a) for a in self.attributes], "price_bucket": self.price_bucket,
                "description": self.description}


class Agents:
    """Prompt rendering, caching, retries and parsing for every layer."""

    def __init__(self, llm: LLMClient, budget: AgentBudget | None = None, options: DecodeOptions | None = None):
        self.llm = llm
        self.budget = budget or AgentBudget()
        self.options = options or DecodeOptions()
        self.cache = ResponseCache(self.budget.cache_dir)

    def ask(self, kind: str, prompt: str, attempt: int = 0) -> str:
        key = prompt_key(f"{kind}#{attempt}", prompt)
        hit = self.cache.get(key)
        if hit is not None:
            return hit
        text = self.llm.complete(prompts.SYSTEM, prompt, self.options)
        self.cache.put(key, text)
        return text

    def _parsed(self, kind: str, prompt: str, parse):
        raw = ""
        err = None
        for attempt in range(self.budget.max_retries + 1):
            raw = self.ask(kind, prompt, attempt)
            try:
                return parse(raw)
            except SchemaError as e:
                err = e
        raise AgentFailure(f"{kind} answer unparseable after {self.budget.max_retries + 1} attempts: {err}",
                           raw, err.code if err else "")

    # ---- layer 1
    def extract_demand_taxonomy(self, category: str, queries: Sequence[str]) -> Taxonomy:
        if not queries:
            raise ValueError("queries must be non-empty")
        prompt = prompts.render(prompts.USER_DEMAND, {"category": category, "queries": list(queries)})
        dims = self._parsed(prompts.USER_DEMAND, prompt, parse_label_list)
        return Taxonomy(prompts.USER_DEMAND, [category], dims)

    def extract_attribute_taxonomy(self, category: str, attributes: Sequence[tuple[str, str]]) -> Taxonomy:
        pairs = []
        for k, v in attributes:
            if [k, v] not in pairs:
                pairs.append([k, v])
        if not pairs:
            raise ValueError("attributes must be non-empty")
        prompt = prompts.render(prompts.PRODUCT_ATTRIBUTE, {"category": category, "attributes": pairs})
        dims = self._parsed(prompts.PRODUCT_ATTRIBUTE, prompt, parse_label_list)
        return Taxonomy(prompts.PRODUCT_ATTRIBUTE, [category], dims)

    # ---- layer 2
    def refine_dimensions(self, parent: Taxonomy, subcategory: str, sample_items: Sequence[ItemMeta]) -> RefinedTaxonomy:
        if not parent.dimensions:
            raise ValueError("parent taxonomy is empty")
        inputs = {"parent_category": parent.category_path[-1], "subcategory": subcategory,
                  "perspective": parent.perspective, "parent_dimensions": list(parent.dimensions),
                  "sample_items": [m.to_prompt() for m in sample_items]}
        perspective = "user demand" if parent.perspective == prompts.USER_DEMAND else "product attribute"
        prompt = prompts.render(prompts.REFINE, inputs, parent=parent.category_path[-1], perspective=perspective)

        def parse(text: str):
            rows = parse_final_list(text)
            dims, prov, caps = [], {}, {}
            for r in rows:
                if not isinstance(r, dict) or not isinstance(r.get("label"), str):
                    raise SchemaError(BAD_LABEL, f"taxonomy row {r!r} lacks a label")
                label = r["label"].strip()
                if not label or len(label) > MAX_LABEL_CHARS:
                    raise SchemaError(BAD_LABEL, f"label {label!r} must have 1..{MAX_LABEL_CHARS} characters")
                if r.get("provenance") not in PROVENANCE:
                    raise SchemaError(BAD_LABEL, f"label {label!r} has provenance {r.get('provenance')!r}")
                if label in prov:
                    raise SchemaError(BAD_LABEL, f"label {label!r} repeated")
                dims.append(label)
                prov[label] = r["provenance"]
                caps[label] = [str(c) for c in r.get("captures", [])]
            return dims, prov, caps, text[:text.upper().rfind("FINAL TAXONOMY:")].rstrip()

        dims, prov, caps, trace = self._parsed(prompts.REFINE, prompt, parse)
        return RefinedTaxonomy(parent.perspective, parent.category_path + [subcategory], dims, prov, caps, trace)

    # ---- layer 3
    def generate_item_knowledge(self, item: ItemMeta, demand: Taxonomy, product: Taxonomy) -> ItemKnowledge:
        if not demand.dimensions or not product.dimensions:
            raise ValueError("both perspectives need at least one dimension")
        request = {"item": item.to_prompt(), "user_demand_dimensions": list(demand.dimensions),
                   "product_attribute_dimensions": list(product.dimensions)}
        prompt = prompts.render(prompts.KNOWLEDGE, request)

        def parse(text):
            return validate_knowledge_json(text, item.item_id, demand.dimensions, product.dimensions)

        raw = self.ask(prompts.KNOWLEDGE, prompt)
        try:
            return parse(raw)
        except SchemaError as first:
            repair = prompts.render(prompts.REPAIR, {"request": request, "previous_answer": raw},
                                    error=str(first))
            raw2 = self.ask(prompts.REPAIR, repair)
            try:
                return parse(raw2)
            except SchemaError as second:
                raise AgentFailure(f"item {item.item_id}: knowledge invalid after repair: {second}",
                                   raw2, second.code) from None


@dataclass
class KnowledgeRun:
    demand: dict[str, Taxonomy]
    product: dict[str, Taxonomy]
    refined_demand: dict[str, RefinedTaxonomy]
    refined_product: dict[str, RefinedTaxonomy]
    knowledge: dict[int, ItemKnowledge]

    def taxonomies_json(self) -> str:
        rows = []
        for name, group in (("demand", self.demand), ("product", self.product),
                            ("refined_demand", self.refined_demand), ("refined_product", self.refined_product)):
            for cat, t in sorted(group.items()):
                rows.append(json.dumps({"layer": name, "category": cat, **asdict(t)}, sort_keys=True))
        return "\n".join(rows) + "\n"


def run_agents(items: Sequence[ItemMeta], queries: dict[str, list[str]], agents: Agents,
               sample_size: int = 8) -> KnowledgeRun:
    """All three layers over a catalog, primary categories first, then leaves, then items."""
    by_primary: dict[str, list[ItemMeta]] = {}
    by_leaf: dict[str, list[ItemMeta]] = {}
    for it in items:
        by_primary.setdefault(it.category_path[0], []).append(it)
        by_leaf.setdefault(it.category_path[1], []).append(it)
    demand, product = {}, {}
    for prim in sorted(by_primary):
        demand[prim] = agents.extract_demand_taxonomy(prim, queries[prim])
        attrs = [a for it in by_primary[prim] for a in it.attributes]
        product[prim] = agents.extract_attribute_taxonomy(prim, attrs)
    rd, rp = {}, {}
    for leaf in sorted(by_leaf):
        members = sorted(by_leaf[leaf], key=lambda m: m.item_id)
        prim = members[0].category_path[0]
        sample = members[:sample_size]
        rd[leaf] = agents.refine_dimensions(demand[prim], leaf, sample)
        rp[leaf] = agents.refine_dimensions(product[prim], leaf, sample)

    def one(it: ItemMeta) -> ItemKnowledge:
        leaf = it.category_path[1]
        return agents.generate_item_knowledge(it, rd[leaf], rp[leaf])

    ordered = sorted(items, key=lambda m: m.item_id)
    with ThreadPoolExecutor(max_workers=agents.budget.max_workers) as pool:
        results = list(pool.map(one, ordered))
    return KnowledgeRun(demand, product, rd, rp, {k.item_id: k for k in results})

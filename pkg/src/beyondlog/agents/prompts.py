"""Prompt templates for the three agent layers.

Each rendered prompt starts with a ``### <title>`` line, carries its inputs as
a JSON block between ``<input>`` tags and ends with an output contract that
asks for a machine-readable final answer.
"""
from __future__ import annotations

import json

USER_DEMAND = "user_demand"
PRODUCT_ATTRIBUTE = "product_attribute"
REFINE = "refine"
KNOWLEDGE = "knowledge"
REPAIR = "repair"

TITLES = {
    USER_DEMAND: "User Demand Orientation",
    PRODUCT_ATTRIBUTE: "Product Attribute Taxonomy Construction",
    REFINE: "Dimension Refinement for Subcategories",
    KNOWLEDGE: "Item-Specific Knowledge Generation",
    REPAIR: "Knowledge JSON Repair",
}

_BODIES = {
    USER_DEMAND: """Task: You are designing a category taxonomy for an e-commerce platform. Given the item category name and a collection of user demand expressions (queries and search terms), construct a structured demand taxonomy by clustering semantically related expressions into orthogonal dimensions.
Procedure:
1. Iterate through demand expressions sequentially. For each expression, determine if it fits within an existing demand dimension based on semantic similarity.
2. If no existing dimension fits the expression, create a new orthogonal one.
3. Give each dimension a concise, representative label.
Requirements:
- Orthogonality: Output dimensions must be mutually exclusive and capture distinct aspects of user demand.
- User-centricity: Ground all dimensions in user needs and motivations; focus on why users seek items, not product features.
- Comprehensiveness: Ensure dimensions collectively cover the major aspects of user intent within the category.
Output:
1. Document your clustering decisions step-by-step.
2. Analyze the resulting dimensions: verify orthogonality, identify potential merges, and justify the final structure.
3. Provide the final taxonomy as a list of dimension labels only.""",
    PRODUCT_ATTRIBUTE: """Task: You are designing a product category taxonomy for an e-commerce platform. Given the category name and a collection of merchant-provided product attributes (key-value specifications), construct a structured attribute taxonomy by clustering semantically related attributes into orthogonal dimensions from a product categorization perspective.
Procedure:
1. Iterate through product attributes sequentially. For each attribute, analyze whether it describes the same underlying product aspect as any existing dimension based on semantic similarity.
2. If no existing dimension adequately captures the attribute's product aspect, create a new orthogonal dimension.
3. Label each dimension with a concise term that represents the product aspect covered by all attributes within that cluster.
Requirements:
- Orthogonality: Output dimensions must be mutually exclusive and capture distinct product characteristics.
- Product-centricity: Ground all dimensions in intrinsic product properties and features; focus on what items inherently are, not user perceptions.
- Normalization: Ensure the taxonomy transcends merchant-specific naming conventions and provides a unified semantic framework.
Output:
1. Document your clustering decisions step-by-step, explaining why attributes are grouped or separated.
2. Analyze the resulting dimensions: verify orthogonality, identify potential merges, and justify the final structure.
3. Provide the final taxonomy as a list of dimension labels only.""",
    REFINE: """Task: You are refining a category taxonomy for subcategories in an e-commerce platform. Given a subcategory name (under parent category {parent}) and the parent category's {perspective} taxonomy, refine the taxonomy to capture subcategory-specific characteristics. The perspective is either user demand orientation (focusing on user needs and motivations) or product attribute orientation (focusing on intrinsic product properties).
Refinement Principles:
- Orthogonality: Refined dimensions must be mutually exclusive and capture distinct aspects without redundancy.
- Comprehensiveness: The dimension set must collectively cover the semantic space relevant to the subcategory from the given perspective.
- Objectivity: All dimensions must be grounded in observable information, either verifiable product attributes or documented user expressions, and derived through logical reasoning.
Refinement Procedure:
Stage 1 - Inherit from Parent: Review the parent category's taxonomy. Identify which dimensions remain applicable to the subcategory and which require modification or removal due to subcategory-specific characteristics.
Stage 2 - Adapt to Subcategory: Analyze the subcategory's unique attributes (for product orientation) or demand patterns (for user orientation). Determine whether inherited dimensions need adaptation, and identify new dimensions that are distinctive to this subcategory.
Output Format:
1. Reasoning Trace: Document your refinement decisions step-by-step. For each dimension, explain whether it is inherited from the parent taxonomy, adapted from a parent dimension, or newly created for the subcategory. Justify these decisions based on subcategory-specific characteristics.
2. Dimension Justification: For each refined dimension, provide: (a) a concise dimension label (<=15 characters), (b) the rationale for inclusion (inherited, adapted, or subcategory-specific), and (c) the corresponding item attributes (for product orientation) or user expressions (for user orientation) that this dimension captures.
3. Final Taxonomy: Summarize the refined dimensions as a structured list of labels only, without explanations.""",
    KNOWLEDGE: """Task: Generate structured, evidence-based knowledge for a given item across predefined analysis dimensions. Analysis should be objective, factually grounded, and derived through explicit reasoning from provided item information.
Input: (1) Item metadata (title, attributes, price, etc.); (2) user demand dimensions; (3) product attribute dimensions.
Analysis Procedure:
- User Demand Analysis: For user demand dimension, characterize how the item addresses that aspect of user need. Explicitly cite supporting attributes (e.g., "100% cotton fabric" for comfort preference) and translate abstract dimensions into concrete item characteristics.
- Product Attribute Analysis: Extract and synthesize key product elements from item metadata. Infer relevant usage scenarios, style characteristics, or functional features based on observable attributes and domain knowledge. All characterizations should be derivable from provided metadata through logical reasoning.
Output Format: JSON object with user demand and product attribute entries:
{{
  "user_demand": [
    {{"dimension": "<dimension label>", "analysis": "<evidence-based characterization>", "keywords": "<3-5 key concepts>"}}, ...
  ],
  "product_attribute": [
    {{"dimension": "<dimension label>", "analysis": "<factual description>", "keywords": "<3-5 key elements>"}}, ...
  ]
}}
Requirements: Ensure all analysis is traceable to specific item attributes. Ground inferences in observable properties and avoid introducing unsupported features or subjective judgments.""",
    REPAIR: """Task: Your previous answer to the item knowledge request below failed validation.
Validator message: {error}
Return only the corrected JSON object, with one entry per requested dimension and the fields dimension, analysis and keywords in every entry.""",
}

_CONTRACTS = {
    USER_DEMAND: 'Finish with a line "FINAL TAXONOMY:" followed by a JSON array of the labels.',
    PRODUCT_ATTRIBUTE: 'Finish with a line "FINAL TAXONOMY:" followed by a JSON array of the labels.',
    REFINE: ('Finish with a line "FINAL TAXONOMY:" followed by a JSON array of objects with keys '
             '"label", "provenance" (inherited | adapted | new) and "captures" (list of strings).'),
    KNOWLEDGE: "Answer with the JSON object only.",
    REPAIR: "Answer with the JSON object only.",
}

SYSTEM = "You are a careful e-commerce knowledge analyst. Follow the output format exactly."


def render(kind: str, inputs: dict, **fmt) -> str:
    if kind not in _BODIES:
        raise KeyError(f"unknown prompt kind {kind!r}")
    body = _BODIES[kind].format(**fmt) if fmt else _BODIES[kind].replace("{{", "{").replace("}}", "}")
    block = json.dumps(inputs, ensure_ascii=False, sort_keys=True, indent=1)
    return f"### {TITLES[kind]}\n{body}\n\n<input>\n{block}\n</input>\n\n{_CONTRACTS[kind]}\n"


def kind_of(prompt: str) -> str:
    first = prompt.split("\n", 1)[0].strip()
    for kind, title in TITLES.items():
        if first == f"### {title}":
            return kind
    raise KeyError(f"unrecognised prompt header {first!r}")


def inputs_of(prompt: str) -> dict:
    start = prompt.index("<input>\n") + len("<input>\n")
    end = prompt.index("\n</input>", start)
    return json.loads(prompt[start:end])

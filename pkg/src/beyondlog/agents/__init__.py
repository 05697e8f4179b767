from . import prompts
from .client import (AgentBudget, DecodeOptions, HTTPChatClient, LLMClient, LLMError, ResponseCache,
                     prompt_key)
from .layers import (MAX_LABEL_CHARS, PROVENANCE, AgentFailure, Agents, ItemMeta, KnowledgeRun,
                     RefinedTaxonomy, Taxonomy, run_agents)
from .mock import MockLLM, MockPromptError, mock_llm
from .schema import SchemaError, parse_label_list, serialize_knowledge, validate_knowledge_json


def item_meta_from_world(world) -> list[ItemMeta]:
    return [ItemMeta(it.item_id, it.title, it.category_path, [tuple(a) for a in it.attributes],
                     int(it.features.get("price_bucket", 0)), it.description) for it in world.items]

"""Prompt templates for the memory-augmented answer path."""

# -------------------- Prompt assembly --------------------
SYSTEM_PROMPT = """You are a long-running assistant with access to a persistent memory of earlier notes.
Answer the user's question using the memory items below when they are relevant.
Cite every memory item you rely on by its id in square brackets, for example [memory:12].
If no memory item is relevant, say so and answer from the conversation alone.
"""

CONVERSATION_HEADER = "Recent conversation:"

CONVERSATION_TURN_TEMPLATE = "- user: {text}"

MEMORY_HEADER = "Memory items (most similar first):"

MEMORY_ITEM_TEMPLATE = "[memory:{item_id}] {content}"

QUERY_TEMPLATE = """Question: {query}
Answer:"""

# -------------------- Mock answerer --------------------
ANSWER_TEMPLATE = """answer-{digest}: drawing on {count} memory item(s){citations}."""

CITATION_TEMPLATE = " [memory:{item_id}]"

NO_MEMORY_ANSWER_TEMPLATE = """answer-{digest}: no stored memory was relevant; answered from the conversation."""

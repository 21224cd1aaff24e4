"""Few-shot operator learning with multimodal prompts and memory."""

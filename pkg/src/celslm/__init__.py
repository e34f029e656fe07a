"""Cloud-edge collaborative LLM/SLM inference toolkit."""

# CLI module
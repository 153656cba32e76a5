"""MCP tools: dataset preparation, training runs, evaluation and reports."""

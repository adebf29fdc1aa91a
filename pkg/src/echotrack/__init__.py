"""echotrack: seeded RF multi-target tracking workbench."""

__version__ = "0.1.0"

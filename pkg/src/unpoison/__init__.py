"""unpoison: plant, trace, and unlearn data-poisoning attacks in small image models."""

__version__ = "0.1.0"

"""Composing frozen sequence models through trainable mapping layers.

A frozen causal language model is bridged between a sequence encoder and
decoder by two small trainable mappings; a relaxed transport loss aligns
decoder-side states with encoder states. Everything here is exercised on
small synthetic cipher languages so the full pipeline trains and evaluates
on a laptop CPU.
"""

__version__ = "0.1.0"

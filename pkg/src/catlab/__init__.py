"""catlab: desk-scale corpus-aware training laboratory.

Train tag-injected seq2seq translation models on synthetic corpora, switch
inference behavior via corpus tags, fine-tune a single tag-embedding row,
and evaluate with chrF plus paired-bootstrap significance.
"""

__version__ = "0.1.0"

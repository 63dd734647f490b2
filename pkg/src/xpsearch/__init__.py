"""Explainable product search over a latent knowledge graph.

Trains vanilla DREM and DREM-HGN embedding models, retrieves and evaluates
ranked item lists, produces path-based and attention-based explanations, and
predicts which explanation group people prefer.
"""

from .corpus import Corpus, load_corpus, build_corpus, parse_purchases, parse_triples, write_corpus
from .store import EmbeddingStore, init_store, load_checkpoint, save_checkpoint
from .model import ModelConfig, train
from .retrieval import evaluate_run, fisher_randomization_test, retrieve_test, retrieve_topk
from .explain import explain_mae, explain_mie, enumerate_paths, soft_match
from .agreement import fleiss_kappa, majority_vote, pearson

__version__ = "0.1.0"

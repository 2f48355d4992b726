"""Set-prediction retrieval of radiology key phrases and report composition."""

from .compose import build_extraction_prompt, build_rag_prompt, generate_report, merge_views
from .decoder import DecoderConfig, PredictionSet, forward, init_params, loss_and_gradients
from .embedding import TokenGrid, add_noise, cosine, fuse_token_grids, hash_embed, interpolate_grid, l2_normalize
from .errors import ExternalServiceError, NumericError, ParseError, RarrgError, ValidationError
from .index import VectorIndex, build_index, load_index, retrieve, save_index
from .losses import LossConfig, semantic_contrastive_loss, total_loss, transq_loss
from .matching import Assignment, build_cost_matrix, hungarian, match_example
from .metrics import binarize_labels, bleu, f1_suite, rouge_l
from .phrase_graph import build_graphs, extract_radgraph_phrases, graph_to_phrase, parse_annotation
from .trainer import SyntheticCorpusConfig, TrainConfig, generate_corpus, lr_at, train

__version__ = "0.1.0"

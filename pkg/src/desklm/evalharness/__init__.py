from .backends import LocalBackend, RemoteChatBackend, UniformBackend
from .harness import (
    EvalReport,
    EvalSuite,
    MCItem,
    SummarizationItem,
    argmax_first,
    compare_backends,
    format_table,
    mc_accuracy,
    perplexity,
    read_mc_items,
    read_summarization_items,
    summarization_eval,
    token_nlls,
    write_reports,
)
from .preferences import PreferenceVote, aggregate_preferences, read_votes_csv
from .rouge import rouge_l, rouge_n

from .optim import Adam, warmup_inverse_sqrt
from .tasks import TASK_KINDS, Corpus, TaskSpec, generate_corpus, read_corpus, write_corpus
from .training import (
    Stage,
    StageSchedule,
    TrainingDiverged,
    TrainingLog,
    correlate_losses,
    evaluate,
    parse_strategy,
    train,
)

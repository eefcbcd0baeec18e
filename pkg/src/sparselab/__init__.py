"""Desk-scale dynamic sparse training with group reweighting on biased data."""

from .autograd import AutogradError, ShapeError, Tensor, backward
from .data import (BiasedDataset, BiasedDatasetSpec, DataFormatError,
                   GroupedExample, build_dataset, colorize, load_dataset,
                   load_idx, make_unbiased_test, save_dataset, synth_glyphs)
from .losses import GroupWeights, erm_loss, reweighted_loss, softmax_cross_entropy
from .metrics import CostReport, EvalReport, count_flops, evaluate
from .models import (Model, ModelSpec, build_mlp, build_simple_cnn,
                     load_checkpoint, param_count, save_checkpoint)
from .optim import AdamState, TrainingAborted, adam_step
from .sparsity import (DensityAllocation, SparseLayerState, SparsityError,
                       TopologySchedule, allocate_density, export_masks,
                       grow_step, import_masks, init_mask, prune_step,
                       topology_update)
from .trainers import (MrmConfig, TrainLoopConfig, TrainRecord, train_erm,
                       train_mrm, train_rest, train_sparse_unweighted)

__version__ = "0.1.0"

from .container import dumps_task, load_task, loads_task, save_task
from .domains import (
    BatchSampler,
    CompositeBatch,
    DomainDataset,
    MultiDomainTask,
    SplitSpec,
    batch_sampler,
    color_label_correlation,
    color_of,
    gen_gaussian_domains,
    make_colored_mnist,
    make_rotated_mnist,
    rotate_images,
    split_train_val,
)
from .idx import load_mnist_idx, parse_idx, read_idx_file, serialize_idx
from .mnist import load_bundled_mnist, load_mnist

__all__ = [
    "BatchSampler", "CompositeBatch", "DomainDataset", "MultiDomainTask", "SplitSpec", "batch_sampler",
    "color_label_correlation", "color_of", "dumps_task", "gen_gaussian_domains", "load_bundled_mnist",
    "load_mnist", "load_mnist_idx", "load_task", "loads_task", "make_colored_mnist", "make_rotated_mnist",
    "parse_idx", "read_idx_file", "rotate_images", "save_task", "serialize_idx", "split_train_val",
]

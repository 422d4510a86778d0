from .dataset import (
    TEST,
    TRAIN,
    DatasetManifest,
    DomainData,
    Entry,
    UnpairedSampler,
    load_eval_set,
    load_image,
    load_manifest,
    load_train_set,
    preprocess,
    preprocess_mask,
    read_manifest_table,
    save_image,
    write_manifest_table,
)
from .phantoms import PhantomSpec, generate_phantoms, phantom_pair

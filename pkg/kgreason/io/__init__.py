from .vocab import Vocab
from .triples import Dataset, LoadedLabels, LoadedTriples, load_dataset, load_labels, load_triples, write_dataset
from .synth import synth
from .artifact import FORMAT_VERSION, ModelArtifact, load_model, save_model

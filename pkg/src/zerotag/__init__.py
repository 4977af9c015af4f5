"""zerotag: zero-shot music tagging and retrieval in a joint audio-word space.

Audio is embedded by a small CNN over log mel-spectrograms, tag labels by a
trained linear projection of pre-trained word vectors; both land on the unit
sphere of one semantic space, trained jointly with a max-margin triplet
objective. Because any tag with a word vector can be projected, the model
can annotate and retrieve with labels it never saw in training.
"""

from .dsp import DspConfig, MelSpectrogram, PatchPolicy, PcmSignal, decode_wav, mel_spectrogram, resample
from .encoder import EncoderConfig, encode_patch, encode_track, init_encoder
from .infer import AnnotationResult, LabelIndex, annotate, build_label_index, nearest_labels, retrieve_tracks
from .metrics import EvalReport, genre_accuracy, roc_auc, tag_retrieval_auc, transfer_evaluate
from .training import ModelCheckpoint, TrainConfig, fit, load_checkpoint, save_checkpoint
from .wordspace import ResolutionPolicy, WordVectorTable, parse_word_vectors, project_tag, resolve_tag

__version__ = "0.1.0"

__all__ = [
    "AnnotationResult", "DspConfig", "EncoderConfig", "EvalReport", "LabelIndex",
    "MelSpectrogram", "ModelCheckpoint", "PatchPolicy", "PcmSignal", "ResolutionPolicy",
    "TrainConfig", "WordVectorTable", "annotate", "build_label_index", "decode_wav",
    "encode_patch", "encode_track", "fit", "genre_accuracy", "init_encoder",
    "load_checkpoint", "mel_spectrogram", "nearest_labels", "parse_word_vectors",
    "project_tag", "resample", "resolve_tag", "retrieve_tracks", "roc_auc",
    "save_checkpoint", "tag_retrieval_auc", "transfer_evaluate",
]

import pytest
import torch
from tokenizers import Tokenizer
from tokenizers.models import WordPiece
from tokenizers.normalizers import BertNormalizer
from tokenizers.pre_tokenizers import BertPreTokenizer
from tokenizers.processors import TemplateProcessing
from transformers import BertConfig, BertModel, PreTrainedTokenizerFast

WORDS = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]",
         "the", "cat", "sat", "on", "mat", "dog", "##s", "a", "ran", "fast"]
HIDDEN_SIZE = 32


@pytest.fixture(scope="session")
def tiny_model_dir(tmp_path_factory):
    """A deterministic offline BERT-style encoder + WordPiece tokenizer."""
    out = tmp_path_factory.mktemp("tiny-model")

    vocab = {w: i for i, w in enumerate(WORDS)}
    tok = Tokenizer(WordPiece(vocab, unk_token="[UNK]"))
    tok.normalizer = BertNormalizer(lowercase=True)
    tok.pre_tokenizer = BertPreTokenizer()
    tok.post_processor = TemplateProcessing(
        single="[CLS] $A [SEP]", pair="[CLS] $A [SEP] $B [SEP]",
        special_tokens=[("[CLS]", vocab["[CLS]"]), ("[SEP]", vocab["[SEP]"])])
    fast = PreTrainedTokenizerFast(
        tokenizer_object=tok, unk_token="[UNK]", pad_token="[PAD]",
        cls_token="[CLS]", sep_token="[SEP]", mask_token="[MASK]")
    fast.save_pretrained(out)

    torch.manual_seed(1234)
    config = BertConfig(vocab_size=len(WORDS), hidden_size=HIDDEN_SIZE,
                        num_hidden_layers=2, num_attention_heads=2,
                        intermediate_size=64, max_position_embeddings=64)
    BertModel(config).save_pretrained(out)
    return out


@pytest.fixture()
def sentences_file(tmp_path):
    path = tmp_path / "sentences.txt"
    path.write_text("the cat sat on the mat\n"
                    "a dog ran fast\n"
                    "\n"
                    "the dogs sat\n", encoding="utf-8")
    return path

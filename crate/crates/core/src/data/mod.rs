//! SemEval ABSA data: parsing, task examples, record files.

mod examples;
mod records;
mod semeval;
pub mod synthetic;

pub use examples::{
    make_ae_example, make_ae_examples, make_asc_examples, spans_from_word_labels, split_last,
    split_train_validation, word_bio, AeExample, AscExample, VALIDATION_SIZE,
};
pub use records::{read_records, write_records, Record};
pub use semeval::{
    detect_schema, load_xml, parse_auto, parse_semeval2014, parse_semeval2016, AspectSpan,
    Polarity, RawSentence, Schema,
};

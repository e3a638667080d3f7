//! The embedding-conditioned perturbation generator: an image encoder, one bank of
//! learnable class embeddings per task (or a label-map embedder for dense tasks), and a
//! decoder whose output is clipped to the ε-box.

pub mod checkpoint;
pub mod net;
pub mod reg;
pub mod train;

pub use checkpoint::{load_generator, save_generator, GeneratorManifest};
pub use net::{generator_forward, GenArch, GenVars, PerturbGenerator, ProtectionMask, EMBED_INIT};
pub use reg::{inter_er, inter_er_graph, intra_er, intra_er_graph};
pub use train::{
    composite_loss, craft_with_generator, embedding_stats, poison_with_generator, train_generator, BaseUe, GenEpochRecord, GenTrainConfig,
    GenTrainOutcome, LossParts,
};

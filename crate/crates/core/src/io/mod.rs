//! On-disk formats: splat PLY, textured OBJ bundles and optimizer checkpoints.

mod checkpoint;
mod obj;
mod ply;

pub use checkpoint::{
    decode_optimizer, encode_optimizer, load_optimizer, save_optimizer, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use obj::{
    encode_obj, export_mesh, import_mesh, parse_obj, read_obj, MeshFiles, ObjData, DIFFUSE_FILE, MTL_FILE,
    NORMAL_FILE, OBJ_FILE, ROUGHNESS_METALLIC_FILE,
};
pub use ply::{decode_ply, encode_ply, export_ply, import_ply, PLY_PROPERTIES};

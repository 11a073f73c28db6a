//! Device passes: layer groups, DDR addresses and code generation.

mod address;
mod codegen;
mod group;
pub mod isa;
mod lmem;
mod program;

pub use address::{assign_addresses, ddr_intervals};
pub use codegen::codegen;
pub use group::{audit_groups, group_lmem_operands, group_schedule, layer_group, AuditFinding, GroupSchedule};
pub use isa::{Instruction, Space, TensorRef};
pub use lmem::{align_up, backward_slice, hull, lmem_size, pad_top_eff, row_bytes, split_even};
pub use program::{load_program, parse_program, save_program, serialize_program, IoEntry, TpuProgram};

pub mod allocator;
pub mod interlock;
pub mod memory;
pub mod objectstore;
pub mod prefixcache;
pub mod shm;
pub mod check;

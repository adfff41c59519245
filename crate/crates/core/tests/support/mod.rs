pub mod fd;
pub mod oracle;

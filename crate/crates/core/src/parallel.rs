/// Runs `job` on a dedicated pool of `workers` threads (`0` = one per core).
/// Falls back to the calling thread if no pool can be built.
pub(crate) fn install<R: Send>(workers: usize, job: impl FnOnce() -> R + Send) -> R {
    match rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
        Ok(pool) => pool.install(job),
        Err(e) => {
            log::warn!("thread pool unavailable ({e}); running inline");
            job()
        }
    }
}

//! Data-parallel helpers. With the `parallel` feature the default entry points
//! fan out over rayon's pool; without it they run sequentially. Both variants
//! return results in input order, so outputs never depend on scheduling.

pub fn map_collect_seq<T, U, E, F>(items: &[T], f: F) -> Result<Vec<U>, E>
where
    F: Fn(&T) -> Result<U, E>,
{
    items.iter().map(f).collect()
}

#[cfg(feature = "parallel")]
pub fn map_collect_par<T, U, E, F>(items: &[T], f: F) -> Result<Vec<U>, E>
where
    T: Sync,
    U: Send,
    E: Send,
    F: Fn(&T) -> Result<U, E> + Sync + Send,
{
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(feature = "parallel")]
pub fn map_collect<T, U, E, F>(items: &[T], f: F) -> Result<Vec<U>, E>
where
    T: Sync,
    U: Send,
    E: Send,
    F: Fn(&T) -> Result<U, E> + Sync + Send,
{
    map_collect_par(items, f)
}

#[cfg(not(feature = "parallel"))]
pub fn map_collect<T, U, E, F>(items: &[T], f: F) -> Result<Vec<U>, E>
where
    T: Sync,
    U: Send,
    E: Send,
    F: Fn(&T) -> Result<U, E> + Sync + Send,
{
    map_collect_seq(items, f)
}

pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved_and_errors_propagate() {
        let xs: Vec<u32> = (0..100).collect();
        let ys = map_collect(&xs, |&x| Ok::<_, ()>(x * 2)).unwrap();
        assert_eq!(ys, map_collect_seq(&xs, |&x| Ok::<_, ()>(x * 2)).unwrap());
        assert_eq!(ys[37], 74);
        let e = map_collect(&xs, |&x| if x == 50 { Err(x) } else { Ok(x) });
        assert_eq!(e, Err(50));
    }
}

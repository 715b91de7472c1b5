import numpy as np
import matplotlib.pyplot as plt

def plot_history(history, ax=None, title=None):
    """
    Training and validation loss per epoch on a log axis, with the best
    validation epoch marked
    """
    if ax is None:
        f = plt.figure(figsize=(7, 4))
        ax = f.add_subplot(111)
    epochs = history.column('epoch')
    ax.semilogy(epochs, history.column('train_loss'), 'b-', label='train')
    ax.semilogy(epochs, history.column('val_loss'), 'r-', label='validation')
    if history.best_epoch >= 0:
        ax.axvline(history.best_epoch, color='k', linestyle=':', label='best')
    ax.set_xlabel('Epoch')
    ax.set_ylabel('Loss (normalized units)')
    ax.legend(loc='upper right')
    if title is not None:
        ax.set_title(title)
    return ax

def plot_node_errors(mesh, errors, ax=None, title=None, **scatter_kwargs):
    """
    Side view (x vs z) of the mesh nodes colored by node error (cm)
    """
    if ax is None:
        f = plt.figure(figsize=(5, 6))
        ax = f.add_subplot(111)
    errors = np.asarray(errors)
    #Draw the worst nodes last so they stay visible
    order = np.argsort(errors)
    if 'vmin' not in scatter_kwargs:
        scatter_kwargs['vmin'] = 0.
    if 'vmax' not in scatter_kwargs:
        scatter_kwargs['vmax'] = np.nanpercentile(errors, 95) if errors.size else 1.
    mappable = ax.scatter(mesh.nodes[order, 0], mesh.nodes[order, 2], c=errors[order],
                          s=8, cmap='viridis', **scatter_kwargs)
    ax.set_aspect('equal')
    ax.set_xlabel('x (cm)')
    ax.set_ylabel('z (cm)')
    ax.figure.colorbar(mappable, ax=ax, label='Node error (cm)')
    if title is not None:
        ax.set_title(title)
    return mappable

def save_figure(fig, path):
    fig.savefig(path, dpi=120, bbox_inches='tight')
    plt.close(fig)
